"""Two-phase training: independent pretraining of the retrieval encoder and
the segmentation backbone, then the joint loop where both are updated from a
single segmentation loss computed on retrieval-guided inputs."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .fusion import (ChannelAdapter, FusedGuide, FusionConfig, FusionStrategy,
                     early_fuse, fuse_guides, fusion_weights)
from .metrics import (EvalReport, aggregate, case_analysis, dice_score,
                      hausdorff, make_case_result)
from .noise import NoiseConfig, apply_guide_noise
from .retrieval import (KnowledgeBase, RetrievalConfig, RetrievalModel,
                        batch_similarity_matrix, build_knowledge_base,
                        contrastive_capacity, embed, make_contrastive_pairs,
                        nt_xent_loss, retrieve_topk, to_three_channels)
from .segmentation import (CrossAttentionSegmenter, DualEncoderSegmenter,
                           build_backbone, predict, seg_loss)

GALLERY_SOURCES = ("train", "external")

# fixed stage tags feeding the seed mixer, so every RNG stream is independent
_S_INIT, _S_RET, _S_SEG, _S_JOINT, _S_NOISE = 11, 23, 37, 53, 71


def _mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain_ret: int = 8
    epochs_pretrain_seg: int = 15
    epochs_joint: int = 5
    batch_size: int = 8
    lr_retrieval: float = 1e-3
    lr_segmentation: float = 1e-3
    seed: int = 0
    backbone: str = "tiny-cnn"
    embed_dim: int = 128
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    noise: NoiseConfig | None = None
    gallery_source: str = "train"
    from_scratch: bool = False

    def validate(self) -> None:
        for name in ("epochs_pretrain_ret", "epochs_pretrain_seg", "epochs_joint",
                     "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr_retrieval <= 0 or self.lr_segmentation <= 0:
            raise ValueError("learning rates must be > 0")
        if self.gallery_source not in GALLERY_SOURCES:
            raise ValueError(f"gallery_source must be one of {GALLERY_SOURCES}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.retrieval.validate()
        self.fusion.validate()
        if self.noise is not None:
            self.noise.validate()


@dataclass
class TrainAudit:
    """Counters the joint loop maintains so tests can verify the training
    contract: every retrieval call exclusion-checked, one backward per step."""

    retrieval_calls: int = 0
    steps: int = 0
    backward_calls: int = 0


@dataclass
class TrainState:
    retrieval: RetrievalModel
    backbone: torch.nn.Module
    adapter: ChannelAdapter | None
    strategy_module: torch.nn.Module | None
    baseline: torch.nn.Module
    kb: KnowledgeBase | None = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    audit: TrainAudit = field(default_factory=TrainAudit)
    opt_ret_state: dict | None = None
    opt_seg_state: dict | None = None

    def seg_parameters(self):
        if self.strategy_module is not None:
            return list(self.strategy_module.parameters())
        params = list(self.backbone.parameters())
        if self.adapter is not None:
            params += list(self.adapter.parameters())
        return params

    def snapshot_baseline(self) -> None:
        """Freeze a copy of the current backbone as the no-retrieval baseline."""
        self.baseline = copy.deepcopy(self.backbone)
        self.baseline.eval()
        for p in self.baseline.parameters():
            p.requires_grad_(False)


def build_models(cfg: TrainConfig, num_classes: int, height: int, width: int) -> TrainState:
    """Construct retrieval model, backbone, adapter/fusion wrapper, and the
    baseline copy, with deterministic seeded initialization."""
    cfg.validate()
    torch.manual_seed(_mix_seed(cfg.seed, _S_INIT))
    retrieval = RetrievalModel(embed_dim=cfg.embed_dim)
    backbone = build_backbone(cfg.backbone, num_classes, height, width)
    adapter = None
    strategy_module = None
    if cfg.fusion.strategy == FusionStrategy.EARLY:
        adapter = ChannelAdapter()
    elif cfg.fusion.strategy == FusionStrategy.CROSS_ATTENTION:
        strategy_module = CrossAttentionSegmenter(backbone)
    else:
        guide_encoder = build_backbone(cfg.backbone, num_classes, height, width)
        strategy_module = DualEncoderSegmenter(backbone, guide_encoder)
    state = TrainState(
        retrieval=retrieval, backbone=backbone, adapter=adapter,
        strategy_module=strategy_module, baseline=copy.deepcopy(backbone),
    )
    state.snapshot_baseline()
    return state


def pretrain_retrieval(model: RetrievalModel, data: Dataset, cfg: TrainConfig) -> list[dict]:
    """Contrastive pretraining; returns the per-epoch loss history."""
    cfg.validate()
    if cfg.epochs_pretrain_ret == 0:
        return []
    capacity = contrastive_capacity(data)
    if capacity == 0:
        raise ValueError("no patient has two consecutive slices within one phase")
    b = max(1, min(cfg.batch_size, capacity))
    steps = max(1, capacity // b)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_retrieval)
    model.train()
    history = []
    for ep in range(cfg.epochs_pretrain_ret):
        losses = []
        for st in range(steps):
            batch = make_contrastive_pairs(data, b, _mix_seed(cfg.seed, _S_RET, ep, st))
            batch.similarity_matrix = batch_similarity_matrix(model, batch)
            loss = nt_xent_loss(batch, cfg.retrieval.contrastive_tau)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite contrastive loss at epoch {ep} step {st}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append({"epoch": ep, "loss": float(np.mean(losses))})
    return history


def pretrain_segmentation(backbone: torch.nn.Module, data: Dataset,
                          cfg: TrainConfig) -> list[dict]:
    """Supervised pretraining on plain 3-channel inputs, no retrieval."""
    cfg.validate()
    if cfg.epochs_pretrain_seg == 0:
        return []
    dtype = next(backbone.parameters()).dtype
    images = torch.stack([to_three_channels(s.image, dtype=dtype) for s in data])
    targets = torch.stack([torch.as_tensor(np.array(s.mask, copy=True), dtype=torch.long)
                           for s in data])
    opt = torch.optim.Adam(backbone.parameters(), lr=cfg.lr_segmentation)
    bs = max(1, min(cfg.batch_size, len(data)))
    backbone.train()
    history = []
    for ep in range(cfg.epochs_pretrain_seg):
        order = np.random.default_rng(_mix_seed(cfg.seed, _S_SEG, ep)).permutation(len(data))
        totals, dices, ces = [], [], []
        for start in range(0, len(data), bs):
            idx = order[start:start + bs]
            lv = seg_loss(backbone(images[idx]), targets[idx])
            if not torch.isfinite(lv.total):
                raise RuntimeError(f"non-finite segmentation loss at epoch {ep}")
            opt.zero_grad()
            lv.total.backward()
            opt.step()
            totals.append(float(lv.total.detach()))
            dices.append(float(lv.dice_term.detach()))
            ces.append(float(lv.ce_term.detach()))
        history.append({
            "epoch": ep, "loss": float(np.mean(totals)),
            "dice_term": float(np.mean(dices)), "ce_term": float(np.mean(ces)),
        })
    return history


def _guided_logits(state: TrainState, record, cfg: TrainConfig, kb: KnowledgeBase,
                   retrieval_cfg: RetrievalConfig, noise_cfg: NoiseConfig | None,
                   noise_seed: int):
    """Forward pass of the guided pipeline for one query slice."""
    dtype = next(state.retrieval.parameters()).dtype
    q_img = to_three_channels(record.image, dtype=dtype)
    q_emb = embed(state.retrieval, q_img)
    hits = retrieve_topk(kb, q_emb, record.patient_id, retrieval_cfg)
    state.audit.retrieval_calls += 1
    sims = torch.stack([h.similarity for h in hits])
    weights = fusion_weights(sims, cfg.fusion.tau_fusion)
    guide = fuse_guides(hits, weights, kb.num_classes)
    if noise_cfg is not None and noise_cfg.kind != "none":
        # noise hits the fused guide only; query image and target stay clean
        noisy_image, noisy_mask = apply_guide_noise(guide.image, guide.mask,
                                                    noise_cfg, noise_seed)
        guide = FusedGuide(image=noisy_image, mask=noisy_mask)
    if cfg.fusion.strategy == FusionStrategy.EARLY:
        fused = early_fuse(q_img, guide, state.adapter)
        logits = state.backbone(fused.projected.unsqueeze(0))[0]
    else:
        logits = state.strategy_module(q_img, guide)
    return logits, hits


def joint_train(state: TrainState, train_data: Dataset, cfg: TrainConfig,
                gallery: Dataset | None = None, on_step=None, on_epoch=None) -> TrainState:
    """Joint loop: refresh the detached knowledge base each epoch, then for
    every query retrieve, fuse, predict, and apply one optimizer step to both
    networks from the single segmentation loss."""
    cfg.validate()
    gallery = train_data if gallery is None else gallery
    if cfg.epochs_joint <= state.epoch:
        return state
    if state.epoch == 0:
        state.snapshot_baseline()

    opt_ret = torch.optim.Adam(state.retrieval.parameters(), lr=cfg.lr_retrieval)
    opt_seg = torch.optim.Adam(state.seg_parameters(), lr=cfg.lr_segmentation)
    if state.opt_ret_state is not None:
        opt_ret.load_state_dict(state.opt_ret_state)
    if state.opt_seg_state is not None:
        opt_seg.load_state_dict(state.opt_seg_state)

    state.retrieval.train()
    state.backbone.train()
    if state.strategy_module is not None:
        state.strategy_module.train()

    for ep in range(state.epoch, cfg.epochs_joint):
        state.kb = build_knowledge_base(state.retrieval, gallery, epoch=ep)
        order = np.random.default_rng(_mix_seed(cfg.seed, _S_JOINT, ep)).permutation(
            len(train_data))
        totals, dices, ces = [], [], []
        for step, i in enumerate(order):
            record = train_data[int(i)]
            noise_seed = (_mix_seed(cfg.noise.seed, _S_NOISE, ep, step)
                          if cfg.noise is not None else 0)
            logits, hits = _guided_logits(state, record, cfg, state.kb,
                                          cfg.retrieval, cfg.noise, noise_seed)
            lv = seg_loss(logits, record.mask)
            if not torch.isfinite(lv.total):
                raise RuntimeError(f"non-finite joint loss at epoch {ep} step {step}")
            opt_ret.zero_grad()
            opt_seg.zero_grad()
            lv.total.backward()  # the single shared objective
            state.audit.backward_calls += 1
            opt_ret.step()
            opt_seg.step()
            state.audit.steps += 1
            totals.append(float(lv.total.detach()))
            dices.append(float(lv.dice_term.detach()))
            ces.append(float(lv.ce_term.detach()))
            if on_step is not None:
                on_step(state, {
                    "epoch": ep, "step": step, "loss": float(lv.total.detach()),
                    "query_patient": record.patient_id,
                    "hit_patients": [h.patient_id for h in hits],
                    "logits": logits.detach().clone(),
                })
        state.epoch = ep + 1
        state.history.append({
            "epoch": ep, "loss": float(np.mean(totals)),
            "dice_term": float(np.mean(dices)), "ce_term": float(np.mean(ces)),
        })
        state.opt_ret_state = opt_ret.state_dict()
        state.opt_seg_state = opt_seg.state_dict()
        if on_epoch is not None:
            on_epoch(state)
    return state


def train_joint_pipeline(train_data: Dataset, cfg: TrainConfig,
                         gallery: Dataset | None = None) -> TrainState:
    """Convenience: build models, pretrain both networks, then joint-train."""
    state = build_models(cfg, train_data.num_classes, train_data.height, train_data.width)
    if not cfg.from_scratch:
        pretrain_retrieval(state.retrieval, train_data, cfg)
        pretrain_segmentation(state.backbone, train_data, cfg)
    state.snapshot_baseline()
    return joint_train(state, train_data, cfg, gallery=gallery)


# --- evaluation -----------------------------------------------------------------

def _case_dice_from_counts(inter: int, p: int, g: int) -> float:
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    return 2.0 * inter / (p + g)


def _finalize_cases(acc: dict, foreground: list[int]) -> list:
    cases = []
    for (pid, phase), data in sorted(acc.items()):
        per_dice, per_hd = {}, {}
        for c in foreground:
            inter, p, g = data["counts"][c]
            per_dice[c] = _case_dice_from_counts(inter, p, g)
            # HD is missing when the class never occurs in either mask
            per_hd[c] = max(data["hds"][c]) if (p > 0 or g > 0) else None
        cases.append(make_case_result(pid, phase, per_dice, per_hd))
    return cases


def evaluate(state: TrainState, test_data: Dataset, gallery: Dataset | None,
             cfg: TrainConfig, topk: int | None = None, dynamic: bool | None = None,
             theta: float | None = None, noise_cfg: NoiseConfig | None = None,
             include_baseline: bool = True) -> EvalReport:
    """Evaluate the guided pipeline (and the no-retrieval baseline) on a test set.

    ``topk=0`` runs the pure baseline path and never touches retrieval.
    Evaluation is pure: identical inputs yield identical reports.
    """
    cfg.validate()
    retrieval_cfg = cfg.retrieval
    if topk is not None and topk > 0:
        retrieval_cfg = replace(retrieval_cfg, k=topk)
    if dynamic is not None:
        retrieval_cfg = replace(retrieval_cfg, dynamic=dynamic)
    if theta is not None:
        retrieval_cfg = replace(retrieval_cfg, theta_threshold=theta)
    baseline_only = topk == 0

    retrieval_calls_before = state.audit.retrieval_calls
    kb = None
    if not baseline_only:
        if gallery is None:
            raise ValueError("guided evaluation needs a gallery dataset")
        kb = build_knowledge_base(state.retrieval, gallery, epoch=state.epoch)

    foreground = list(range(1, test_data.num_classes))
    state.retrieval.eval()
    state.backbone.eval()
    if state.strategy_module is not None:
        state.strategy_module.eval()

    def accumulate(acc, record, pred):
        """Returns the per-class (dice, hd) slice metrics while updating the
        per-case accumulators."""
        key = (record.patient_id, record.phase)
        slot = acc.setdefault(key, {
            "counts": {c: [0, 0, 0] for c in foreground},
            "hds": {c: [] for c in foreground},
        })
        gt = np.asarray(record.mask)
        out = {}
        for c in foreground:
            p = pred == c
            g = gt == c
            slot["counts"][c][0] += int((p & g).sum())
            slot["counts"][c][1] += int(p.sum())
            slot["counts"][c][2] += int(g.sum())
            hd = hausdorff(pred, gt, c)
            slot["hds"][c].append(hd)
            out[c] = (dice_score(pred, gt, c), hd)
        return out

    main_acc, base_acc = {}, {}
    slice_rows = []
    for pos, record in enumerate(test_data):
        q_img = to_three_channels(record.image,
                                  dtype=next(state.backbone.parameters()).dtype)
        if baseline_only:
            pred = predict(state.baseline, q_img)
        else:
            with torch.no_grad():
                eval_noise_seed = (_mix_seed(noise_cfg.seed, _S_NOISE, 997, pos)
                                   if noise_cfg is not None else 0)
                logits, _ = _guided_logits(state, record, cfg, kb, retrieval_cfg,
                                           noise_cfg, eval_noise_seed)
            pred = np.argmax(logits.cpu().numpy(), axis=0).astype(np.uint8)
        per_class = accumulate(main_acc, record, pred)
        for c in foreground:
            slice_rows.append({
                "patient_id": record.patient_id, "phase": record.phase,
                "slice_index": record.slice_index, "class_id": c,
                "dice": per_class[c][0], "hd": per_class[c][1],
            })
        if include_baseline and not baseline_only:
            base_pred = predict(state.baseline, q_img)
            accumulate(base_acc, record, base_pred)

    cases = _finalize_cases(main_acc, foreground)
    report = EvalReport(cases=cases, aggregate=aggregate(cases), slice_rows=slice_rows)
    report.meta = {
        "topk": 0 if baseline_only else (None if retrieval_cfg.dynamic else retrieval_cfg.k),
        "dynamic": bool(retrieval_cfg.dynamic) and not baseline_only,
        "noise": noise_cfg.kind if noise_cfg is not None else "none",
        "retrieval_calls": state.audit.retrieval_calls - retrieval_calls_before,
        "num_slices": len(test_data),
        "epoch": state.epoch,
    }
    if baseline_only:
        report.baseline_cases = cases
        report.baseline_aggregate = report.aggregate
        report.baseline_comparison = case_analysis(cases, cases)
    elif include_baseline:
        base_cases = _finalize_cases(base_acc, foreground)
        report.baseline_cases = base_cases
        report.baseline_aggregate = aggregate(base_cases)
        report.baseline_comparison = case_analysis(cases, base_cases)
    return report


# --- checkpointing -----------------------------------------------------------------

def write_history_csv(history: list[dict], path) -> None:
    if not history:
        Path(path).write_text("epoch,loss\n")
        return
    keys = [k for k in history[0] if k != "epoch"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch"] + keys)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(row[k]) for k in keys])


def save_checkpoint(state: TrainState, cfg: TrainConfig, run_dir, stage: str,
                    config_hash: str = "") -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.save({
        "model": state.retrieval.state_dict(),
        "optimizer": state.opt_ret_state,
        "embed_dim": cfg.embed_dim,
    }, run_dir / "retrieval.pt")
    torch.save({
        "backbone": state.backbone.state_dict(),
        "adapter": state.adapter.state_dict() if state.adapter is not None else None,
        "strategy_module": (state.strategy_module.state_dict()
                            if state.strategy_module is not None else None),
        "baseline": state.baseline.state_dict(),
        "optimizer": state.opt_seg_state,
        "backbone_name": cfg.backbone,
        "strategy": cfg.fusion.strategy.value,
    }, run_dir / "segmentation.pt")
    (run_dir / "state.json").write_text(json.dumps({
        "epoch": state.epoch,
        "seed": cfg.seed,
        "stage": stage,
        "config_hash": config_hash,
        "history": state.history,
    }, indent=2) + "\n")


def load_checkpoint(run_dir, cfg: TrainConfig, num_classes: int, height: int,
                    width: int) -> TrainState:
    run_dir = Path(run_dir)
    state = build_models(cfg, num_classes, height, width)
    ret_blob = torch.load(run_dir / "retrieval.pt", weights_only=False)
    seg_blob = torch.load(run_dir / "segmentation.pt", weights_only=False)
    state.retrieval.load_state_dict(ret_blob["model"])
    state.backbone.load_state_dict(seg_blob["backbone"])
    if state.adapter is not None and seg_blob["adapter"] is not None:
        state.adapter.load_state_dict(seg_blob["adapter"])
    if state.strategy_module is not None and seg_blob["strategy_module"] is not None:
        state.strategy_module.load_state_dict(seg_blob["strategy_module"])
    state.baseline.load_state_dict(seg_blob["baseline"])
    state.opt_ret_state = ret_blob.get("optimizer")
    state.opt_seg_state = seg_blob.get("optimizer")
    sidecar = json.loads((run_dir / "state.json").read_text())
    state.epoch = sidecar["epoch"]
    state.history = sidecar.get("history", [])
    return state
