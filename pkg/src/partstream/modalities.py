"""Unified multi-modality input: joint, bone, joint-velocity, bone-velocity.

All four signals are derived from raw joint coordinates and concatenated
along the channel axis before the network, instead of training one network
per modality. Functions operate on tensors shaped [C, T, N, M] and are
differentiable, so gradients can be checked straight through the stack.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, Tensor, concat, narrow, sub, take

__all__ = ["ModalitySelection", "MODALITY_NAMES", "bones", "velocity", "assemble"]

MODALITY_NAMES = ("joint", "bone", "joint_vel", "bone_vel")


@dataclass(frozen=True)
class ModalitySelection:
    joint: bool = True
    bone: bool = True
    joint_vel: bool = True
    bone_vel: bool = True

    def __post_init__(self):
        if not any((self.joint, self.bone, self.joint_vel, self.bone_vel)):
            raise ConfigError("at least one modality must be selected")

    @classmethod
    def from_names(cls, names):
        names = list(names)
        unknown = set(names) - set(MODALITY_NAMES)
        if unknown:
            raise ConfigError(f"unknown modalities: {sorted(unknown)}")
        return cls(**{m: m in names for m in MODALITY_NAMES})

    def names(self):
        return [m for m in MODALITY_NAMES if getattr(self, m)]

    @property
    def count(self):
        return len(self.names())

    def channels(self, coord_channels=3):
        return coord_channels * self.count


def bones(x, parent):
    """Per-joint offset from the tree parent; the root's bone is zero.

    x: [C,T,N,M]; parent: local parent indices of the same N joints.
    """
    parent = np.asarray(parent, dtype=np.intp)
    if len(parent) != x.shape[2]:
        raise ConfigError(f"parent array length {len(parent)} != joints {x.shape[2]}")
    return sub(x, take(x, parent, axis=2))


def velocity(x):
    """Forward frame difference along T; the final frame is zero-padded."""
    t = x.shape[1]
    if t < 2:
        raise ConfigError(f"velocity needs at least 2 frames, got {t}")
    d = sub(narrow(x, 1, 1, t - 1), narrow(x, 1, 0, t - 1))
    pad = Tensor(np.zeros((x.shape[0], 1) + tuple(x.shape[2:]), dtype=x.dtype))
    return concat([d, pad], axis=1)


def assemble(x, parent, selection=ModalitySelection()):
    """Stack the selected modalities along channels: [3,T,N,M] -> [3k,T,N,M].

    Channel order is fixed (joint, bone, joint_vel, bone_vel) restricted to
    the selection; bone velocity differences consecutive frames of the bone
    signal.
    """
    parts = []
    bone = None
    if selection.joint:
        parts.append(x)
    if selection.bone or selection.bone_vel:
        bone = bones(x, parent)
    if selection.bone:
        parts.append(bone)
    if selection.joint_vel:
        parts.append(velocity(x))
    if selection.bone_vel:
        parts.append(velocity(bone))
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)
