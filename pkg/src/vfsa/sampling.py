"""Reference-frame sampling around a key frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAIN_FRAMES = 16
EVAL_GLOBAL_FRAMES = 31


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "global"
    count: int = EVAL_GLOBAL_FRAMES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("global", "local"):
            raise ValueError(f"strategy must be 'global' or 'local', got {self.strategy!r}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")


def sample(video_len: int, key: int, cfg: SamplerConfig) -> list[int]:
    """Frame indices to aggregate for ``key``, sorted, always including it.

    Global draws come from a generator seeded by ``(cfg.seed, key)`` so each
    key's references do not depend on processing order.
    """
    if not 0 <= key < video_len:
        raise ValueError(f"key {key} outside video of length {video_len}")
    count = min(cfg.count, video_len)
    if cfg.strategy == "local":
        start = key - count // 2
        start = max(0, min(start, video_len - count))
        return list(range(start, start + count))
    if count == video_len:
        return list(range(video_len))
    rng = np.random.default_rng([cfg.seed, key])
    others = np.delete(np.arange(video_len), key)
    picked = rng.choice(others, size=count - 1, replace=False)
    return sorted([key, *map(int, picked)])
