import numpy as np
import pytest
import torch

from ragseg import TrainConfig, generate_toy_dataset
from ragseg.fusion import FusionConfig
from ragseg.retrieval import RetrievalConfig

# keep CPU math reproducible across test-process runs
torch.set_num_threads(2)


@pytest.fixture(scope="session")
def toy32():
    """4 patients x 2 phases x 3 slices at 32x32."""
    return generate_toy_dataset(4, 3, 32, 32, seed=7)


@pytest.fixture(scope="session")
def toy32_big():
    """6 patients, used where a larger gallery matters."""
    return generate_toy_dataset(6, 3, 32, 32, seed=11)


def tiny_train_config(**kw) -> TrainConfig:
    """Small-but-real config for fast end-to-end tests."""
    defaults = dict(
        epochs_pretrain_ret=2,
        epochs_pretrain_seg=3,
        epochs_joint=1,
        batch_size=4,
        lr_retrieval=1e-3,
        lr_segmentation=1e-3,
        seed=0,
        backbone="tiny-cnn",
        embed_dim=16,
        retrieval=RetrievalConfig(k=2),
        fusion=FusionConfig(),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def connected_components_4(mask: np.ndarray, label: int) -> int:
    """Independent oracle: count 4-connected components of one label via BFS."""
    target = mask == label
    seen = np.zeros_like(target, dtype=bool)
    h, w = mask.shape
    count = 0
    for sy in range(h):
        for sx in range(w):
            if target[sy, sx] and not seen[sy, sx]:
                count += 1
                stack = [(sy, sx)]
                seen[sy, sx] = True
                while stack:
                    y, x = stack.pop()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and target[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
    return count
