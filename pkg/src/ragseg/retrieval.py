"""Retrieval side: embedding encoder with projection head, contrastive
pretraining utilities, the epoch-versioned knowledge base, and cosine top-k
search with same-patient exclusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, SliceRecord


class RetrievalError(Exception):
    """Raised when retrieval cannot produce any candidate."""


@dataclass(frozen=True)
class RetrievalConfig:
    """Top-k search and contrastive-loss parameters.

    When ``dynamic`` is set the fixed ``k`` is ignored and the per-query k is
    derived from the number of similarities above ``theta_threshold``, clamped
    to [k_min, k_max].
    """

    k: int = 2
    dynamic: bool = False
    theta_threshold: float = 0.9
    k_min: int = 1
    k_max: int = 10
    contrastive_tau: float = 0.07

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k_min > self.k_max:
            raise ValueError(f"k_min {self.k_min} > k_max {self.k_max}")
        if not -1.0 < self.theta_threshold < 1.0:
            raise ValueError(f"theta_threshold must be in (-1, 1), got {self.theta_threshold}")
        if self.contrastive_tau <= 0:
            raise ValueError(f"contrastive_tau must be > 0, got {self.contrastive_tau}")


def _norm_block(channels: int) -> nn.Module:
    # GroupNorm keeps behaviour independent of batch size; the joint loop
    # routinely runs single-image batches.
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class RetrievalModel(nn.Module):
    """Small convolutional tower plus a 2-layer projection head.

    Maps a 3-channel image to a unit-norm embedding. Real pretrained encoders
    can replace this class as long as they keep the same forward contract:
    (B, 3, H, W) -> (B, embed_dim) with unit L2 norm.
    """

    def __init__(self, embed_dim: int = 128, width: int = 16):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), _norm_block(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, w * 2, 3, stride=2, padding=1), _norm_block(w * 2), nn.ReLU(inplace=True),
            nn.Conv2d(w * 2, w * 4, 3, stride=2, padding=1), _norm_block(w * 4), nn.ReLU(inplace=True),
            nn.Conv2d(w * 4, w * 4, 3, stride=2, padding=1), _norm_block(w * 4), nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.projection_head = nn.Sequential(
            nn.Linear(w * 4, w * 4), nn.ReLU(inplace=True), nn.Linear(w * 4, embed_dim),
        )
        self.embed_dim = embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.pool(self.features(x)).flatten(1)
        z = self.projection_head(feats)
        return F.normalize(z, dim=1, eps=1e-12)


def to_three_channels(image, dtype=torch.float32) -> torch.Tensor:
    """Lift a (H, W) or (3, H, W) array/tensor to a (3, H, W) tensor."""
    if torch.is_tensor(image):
        t = image.to(dtype)
    else:
        # copy: dataset arrays are frozen read-only and torch wants writable memory
        t = torch.as_tensor(np.array(image, copy=True), dtype=dtype)
    if t.dim() == 2:
        t = t.unsqueeze(0).expand(3, -1, -1).contiguous()
    if t.dim() != 3 or t.shape[0] != 3:
        raise ValueError(f"expected (H, W) or (3, H, W), got shape {tuple(t.shape)}")
    return t


def embed(model: RetrievalModel, image) -> torch.Tensor:
    """Embed one 3-channel image to a unit-norm vector.

    Differentiable with respect to the model parameters whenever gradients
    are enabled; wrap in ``torch.no_grad()`` for inference.
    """
    dtype = next(model.parameters()).dtype
    t = to_three_channels(image, dtype=dtype)
    if not torch.isfinite(t).all():
        raise ValueError("image contains non-finite values")
    return model(t.unsqueeze(0))[0]


def cosine_sim(a, b) -> float:
    """Cosine similarity of two equal-length unit vectors (their dot product)."""
    a = np.asarray(a.detach() if torch.is_tensor(a) else a, dtype=np.float64)
    b = np.asarray(b.detach() if torch.is_tensor(b) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


@dataclass
class KnowledgeBase:
    """Gallery of detached slice embeddings with their guide images and masks.

    Embeddings are computed with gradients disabled and stay fixed until the
    next refresh; ``epoch_tag`` records which epoch produced them.
    """

    patient_ids: np.ndarray        # (N,) str
    phases: np.ndarray             # (N,) str
    slice_indices: np.ndarray      # (N,) int
    embeddings: torch.Tensor       # (N, D), requires_grad == False
    guide_images: torch.Tensor     # (N, 3, H, W)
    guide_masks: torch.Tensor      # (N, H, W) long
    epoch_tag: int
    num_classes: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def entry_ref(self, i: int) -> tuple[str, str, int]:
        return (str(self.patient_ids[i]), str(self.phases[i]), int(self.slice_indices[i]))

    def fingerprint(self) -> bytes:
        import hashlib
        return hashlib.sha256(
            self.embeddings.detach().cpu().numpy().tobytes()
        ).digest()


def build_knowledge_base(model: RetrievalModel, gallery: Dataset, epoch: int,
                         batch_size: int = 32) -> KnowledgeBase:
    """Embed every gallery slice with gradients disabled."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    images = torch.stack([to_three_channels(s.image, dtype=dtype) for s in gallery])
    masks = torch.stack([torch.as_tensor(np.array(s.mask, copy=True), dtype=torch.long)
                         for s in gallery])
    chunks = []
    with torch.no_grad():
        for start in range(0, len(gallery), batch_size):
            chunks.append(model(images[start:start + batch_size]))
    if was_training:
        model.train()
    embeddings = torch.cat(chunks).detach()
    return KnowledgeBase(
        patient_ids=np.array([s.patient_id for s in gallery]),
        phases=np.array([s.phase for s in gallery]),
        slice_indices=np.array([s.slice_index for s in gallery], dtype=np.int64),
        embeddings=embeddings,
        guide_images=images,
        guide_masks=masks,
        epoch_tag=epoch,
        num_classes=gallery.num_classes,
    )


def dynamic_k(similarities, theta_threshold: float, k_min: int, k_max: int) -> int:
    """Adaptive k: the count of similarities above the threshold, clamped to
    [k_min, k_max]."""
    if k_min > k_max:
        raise ValueError(f"k_min {k_min} > k_max {k_max}")
    count = int(sum(1 for s in np.asarray(similarities, dtype=np.float64).ravel()
                    if s > theta_threshold))
    return max(k_min, min(count, k_max))


@dataclass
class RetrievalHit:
    """One retrieved guide. ``similarity`` is a 0-dim torch tensor that stays
    connected to the query embedding, so fusion weights backpropagate into the
    retrieval parameters."""

    kb_index: int
    patient_id: str
    phase: str
    slice_index: int
    similarity: torch.Tensor
    guide_image: torch.Tensor  # (3, H, W)
    guide_mask: torch.Tensor   # (H, W) long

    @property
    def similarity_value(self) -> float:
        return float(self.similarity.detach())


def retrieve_topk(kb: KnowledgeBase, query: torch.Tensor, query_patient: str,
                  cfg: RetrievalConfig) -> list[RetrievalHit]:
    """Top-k most similar gallery entries, never from the query's patient.

    Results are sorted by similarity descending with ties broken by
    (patient_id, phase, slice_index). The returned similarities keep their
    gradient linkage to the query embedding; the detached gallery embeddings
    contribute none.
    """
    cfg.validate()
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    sims = kb.embeddings.detach() @ query  # differentiable through query only
    keep = np.flatnonzero(kb.patient_ids != query_patient)
    if keep.size == 0:
        raise RetrievalError(
            f"all {len(kb)} knowledge-base entries share patient {query_patient!r}; "
            "enlarge the gallery with more patients"
        )
    sims_np = sims.detach().cpu().numpy().astype(np.float64)
    kept_sims = sims_np[keep]
    if cfg.dynamic:
        k_eff = dynamic_k(kept_sims, cfg.theta_threshold, cfg.k_min, cfg.k_max)
    else:
        k_eff = cfg.k
    k_eff = min(k_eff, keep.size)

    # similarity descending, then lexicographic slice reference
    order = np.lexsort((
        kb.slice_indices[keep],
        kb.phases[keep],
        kb.patient_ids[keep],
        -kept_sims,
    ))
    chosen = keep[order[:k_eff]]

    hits = []
    for i in chosen:
        i = int(i)
        pid = str(kb.patient_ids[i])
        if pid == query_patient:  # audited on every call
            raise AssertionError("same-patient entry leaked through exclusion")
        hits.append(RetrievalHit(
            kb_index=i,
            patient_id=pid,
            phase=str(kb.phases[i]),
            slice_index=int(kb.slice_indices[i]),
            similarity=sims[i],
            guide_image=kb.guide_images[i],
            guide_mask=kb.guide_masks[i],
        ))
    return hits


# --- contrastive pretraining -------------------------------------------------

@dataclass
class ContrastiveBatch:
    """2B augmented views with positive-pair bookkeeping.

    ``views[i]`` and ``views[pair_index[i]]`` come from consecutive slices of
    the same patient and phase. ``similarity_matrix`` is filled in by the
    caller once the views are embedded.
    """

    views: torch.Tensor            # (2B, 3, H, W)
    pair_index: np.ndarray         # (2B,)
    refs: list[tuple[str, str, int]]
    similarity_matrix: torch.Tensor | None = None

    @property
    def num_pairs(self) -> int:
        return self.views.shape[0] // 2


def _eligible_pair_starts(dataset: Dataset) -> list[tuple[str, str, int]]:
    """Consecutive-slice pair starts, thinned so any two chosen pairs from one
    (patient, phase) are at least 3 indices apart. That spacing guarantees no
    cross-pair view ever equals or neighbours another pair's views."""
    by_group: dict[tuple[str, str], list[int]] = {}
    for s in dataset:
        by_group.setdefault((s.patient_id, s.phase), []).append(s.slice_index)
    starts = []
    for (pid, phase), indices in sorted(by_group.items()):
        present = set(indices)
        candidates = sorted(j for j in present if j + 1 in present)
        last = None
        for j in candidates:
            if last is None or j - last >= 3:
                starts.append((pid, phase, j))
                last = j
    return starts


def contrastive_capacity(dataset: Dataset) -> int:
    """Largest batch size ``make_contrastive_pairs`` accepts for this dataset."""
    return len(_eligible_pair_starts(dataset))


def _augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotation, flips, and contrast jitter; label-geometry-safe defaults."""
    out = image
    h, w = out.shape
    k_choices = (0, 1, 2, 3) if h == w else (0, 2)  # 90-degree turns need square slices
    k = int(rng.choice(k_choices))
    if k:
        out = np.rot90(out, k)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    scale = rng.uniform(0.8, 1.2)
    m = out.mean()
    out = np.clip(m + (out - m) * scale, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


def make_contrastive_pairs(dataset: Dataset, batch_size: int, seed: int) -> ContrastiveBatch:
    """Sample B positive pairs of augmented consecutive slices.

    Views are laid out as [first members..., second members...] so the
    positive of view i is view (i + B) mod 2B. All cross-pair views act as
    negatives; the pair spacing rule keeps every such candidate either
    cross-patient or non-consecutive.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset.patient_ids()) < 2:
        raise ValueError("contrastive batches need at least 2 patients")
    starts = _eligible_pair_starts(dataset)
    if not starts:
        raise ValueError("no patient has two consecutive slices within one phase")
    if batch_size > len(starts):
        raise ValueError(
            f"batch_size {batch_size} exceeds the {len(starts)} non-overlapping "
            "consecutive pairs available"
        )
    rng = np.random.default_rng(seed)
    chosen = [starts[i] for i in rng.permutation(len(starts))[:batch_size]]

    firsts, seconds, refs_a, refs_b = [], [], [], []
    for pid, phase, j in chosen:
        a = dataset.find(pid, phase, j)
        b = dataset.find(pid, phase, j + 1)
        firsts.append(_augment(a.image, rng))
        seconds.append(_augment(b.image, rng))
        refs_a.append(a.key)
        refs_b.append(b.key)

    views_np = np.stack(firsts + seconds)
    views = torch.stack([to_three_channels(v) for v in views_np])
    b = batch_size
    pair_index = np.concatenate([np.arange(b) + b, np.arange(b)])
    return ContrastiveBatch(views=views, pair_index=pair_index, refs=refs_a + refs_b)


def batch_similarity_matrix(model: RetrievalModel, batch: ContrastiveBatch) -> torch.Tensor:
    """Pairwise cosine similarities of the embedded views, (2B, 2B)."""
    z = model(batch.views.to(next(model.parameters()).dtype))
    return z @ z.T


def _positive_first_cross_entropy(scores: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy over temperature-scaled scores with the positive at index 0."""
    logits = scores / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def nt_xent_loss(batch: ContrastiveBatch, tau: float) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over a contrastive batch.

    For each of the 2B views the candidate vector is [positive, negatives...]
    scaled by ``tau``, scored with cross-entropy against target index 0, and
    averaged over views. A batch with B = 1 has no negatives and scores 0.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if batch.similarity_matrix is None:
        raise ValueError("batch.similarity_matrix has not been computed")
    sim = batch.similarity_matrix
    n = sim.shape[0]
    pair = torch.as_tensor(batch.pair_index, dtype=torch.long)
    logits = sim / tau
    eye = torch.eye(n, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))  # self excluded from candidates
    pos = logits[torch.arange(n), pair]
    return (torch.logsumexp(logits, dim=1) - pos).mean()


# --- snapshot export ----------------------------------------------------------

def save_kb_snapshot(kb: KnowledgeBase, out_dir) -> None:
    """Write the embedding matrix as a raw float32 blob plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emb = kb.embeddings.detach().cpu().numpy().astype("<f4")
    emb.tofile(out_dir / "embeddings.bin")
    index = {
        "epoch_tag": kb.epoch_tag,
        "count": int(emb.shape[0]),
        "dim": int(emb.shape[1]),
        "num_classes": kb.num_classes,
        "entries": [
            {"patient_id": str(p), "phase": str(ph), "slice_index": int(i)}
            for p, ph, i in zip(kb.patient_ids, kb.phases, kb.slice_indices)
        ],
    }
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_kb_snapshot(snap_dir) -> tuple[np.ndarray, list[dict], dict]:
    snap_dir = Path(snap_dir)
    index = json.loads((snap_dir / "index.json").read_text())
    emb = np.fromfile(snap_dir / "embeddings.bin", dtype="<f4").reshape(
        index["count"], index["dim"])
    return emb, index["entries"], index
