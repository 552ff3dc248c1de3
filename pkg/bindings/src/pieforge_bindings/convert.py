"""Checkpoint-format converters: framework-native containers <-> "CKP1".

The native side is any mapping of names to numpy arrays (which covers .npz
archives and exported state dicts); tensors are stored as f32 either way.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from pieforge.ema import Checkpoint, CheckpointFormatError

from .arrays import ContractError


def arrays_to_ckp1(tensors: Mapping[str, np.ndarray], path) -> None:
    """Write a name->array mapping as a CKP1 container."""
    try:
        Checkpoint(tensors).write(Path(path))
    except ValueError as exc:
        raise ContractError(str(exc)) from None


def ckp1_to_arrays(path) -> dict[str, np.ndarray]:
    """Load a CKP1 container into a name->f32-array dict."""
    try:
        return dict(Checkpoint.read(Path(path)).tensors)
    except CheckpointFormatError as exc:
        raise ContractError(str(exc)) from None


def npz_to_ckp1(npz_path, ckp_path) -> None:
    with np.load(npz_path) as archive:
        arrays_to_ckp1({name: archive[name] for name in archive.files}, ckp_path)


def ckp1_to_npz(ckp_path, npz_path) -> None:
    np.savez(npz_path, **ckp1_to_arrays(ckp_path))
