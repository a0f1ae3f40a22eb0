"""Sequence files, manifests, preprocessing, and a synthetic motion generator.

The on-disk interchange is the SKJ format: one UTF-8 JSON header line
``{"skj":1,"topology":str,"T":int,"N":int,"M":int,"label":int}`` followed by
T*N*M*3 little-endian float32 values in (t, n, m, c) row-major order. A
dataset manifest is a JSON array of ``{"path","label","split"}`` records with
paths relative to the manifest file.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .skeleton import get_part_spec, get_topology
from .tensor import ConfigError

__all__ = [
    "ActionSequence", "DatasetManifest", "ManifestItem", "LoadError",
    "write_skj", "load_sequence", "write_manifest", "load_manifest",
    "window_indices", "normalize_sequence", "factorize_parts",
    "person_active", "SynthSpec", "synth_dataset",
]

SKJ_VERSION = 1
_HEADER_FIELDS = {"skj": int, "topology": str, "T": int, "N": int, "M": int, "label": int}


class LoadError(ValueError):
    """A sequence or manifest file violates the interchange format."""


@dataclass
class ActionSequence:
    """One labeled pose clip: coords[c, t, n, m] in global meters-like units."""

    coords: np.ndarray  # [3, T, N, M] float32
    label: int
    meta: dict = field(default_factory=dict)

    @property
    def frames(self):
        return self.coords.shape[1]

    @property
    def joints(self):
        return self.coords.shape[2]

    @property
    def persons(self):
        return self.coords.shape[3]


@dataclass(frozen=True)
class ManifestItem:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    topology: str
    classes: list
    items: list

    @property
    def num_classes(self):
        return len(self.classes)

    def split(self, name):
        return [it for it in self.items if it.split == name]

    def splits(self):
        return sorted({it.split for it in self.items})


def person_active(coords):
    """Boolean mask over the person axis: True where any coordinate is nonzero."""
    return np.any(coords != 0, axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# SKJ read/write


def write_skj(path, seq, topology_name):
    coords = np.asarray(seq.coords, dtype=np.float32)
    c, t, n, m = coords.shape
    header = {"skj": SKJ_VERSION, "topology": topology_name,
              "T": t, "N": n, "M": m, "label": int(seq.label)}
    payload = np.ascontiguousarray(coords.transpose(1, 2, 3, 0)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def _read_header(fh, path):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise LoadError(f"{path}: missing header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: unparsable header ({exc})") from exc
    if not isinstance(header, dict):
        raise LoadError(f"{path}: header is not a JSON object")
    for key, typ in _HEADER_FIELDS.items():
        if key not in header:
            raise LoadError(f"{path}: header field {key!r} missing")
        if not isinstance(header[key], typ) or isinstance(header[key], bool):
            raise LoadError(f"{path}: header field {key!r} must be {typ.__name__}")
    if header["skj"] != SKJ_VERSION:
        raise LoadError(f"{path}: header field 'skj' has unsupported version {header['skj']}")
    if header["T"] < 1 or header["N"] < 1 or header["M"] < 1:
        raise LoadError(f"{path}: header field 'T'/'N'/'M' must be positive")
    return header


def load_sequence(path, topology):
    """Read one SKJ file, validating shape against `topology`."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        if header["topology"] != topology.name:
            raise LoadError(f"{path}: header field 'topology' is {header['topology']!r}, "
                            f"expected {topology.name!r}")
        if header["N"] != topology.num_joints:
            raise LoadError(f"{path}: header field 'N' is {header['N']}, topology "
                            f"{topology.name!r} has {topology.num_joints} joints")
        t, n, m = header["T"], header["N"], header["M"]
        raw = fh.read()
    expected = t * n * m * 3 * 4
    if len(raw) != expected:
        raise LoadError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(flat)):
        raise LoadError(f"{path}: payload contains non-finite values")
    coords = flat.reshape(t, n, m, 3).transpose(3, 0, 1, 2).astype(np.float32)
    return ActionSequence(coords=coords, label=header["label"],
                          meta={"path": str(path)})


def write_manifest(path, items):
    records = [{"path": it.path, "label": int(it.label), "split": it.split}
               for it in items]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")


def load_manifest(path):
    """Read a manifest, check every referenced file, derive topology and classes."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: unparsable manifest ({exc})") from exc
    if not isinstance(records, list) or not records:
        raise LoadError(f"{path}: manifest must be a non-empty JSON array")
    base = os.path.dirname(os.path.abspath(path))
    items = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not {"path", "label", "split"} <= set(rec):
            raise LoadError(f"{path}: entry {i} needs path/label/split")
        full = os.path.join(base, rec["path"])
        if not os.path.isfile(full):
            raise LoadError(f"{path}: entry {i} references missing file {full}")
        if not isinstance(rec["label"], int) or rec["label"] < 0:
            raise LoadError(f"{path}: entry {i} has invalid label {rec['label']!r}")
        items.append(ManifestItem(path=full, label=rec["label"], split=str(rec["split"])))
    with open(items[0].path, "rb") as fh:
        topology = _read_header(fh, items[0].path)["topology"]
    num_classes = max(it.label for it in items) + 1
    classes = [f"class_{k}" for k in range(num_classes)]
    return DatasetManifest(topology=topology, classes=classes, items=items)


# ---------------------------------------------------------------------------
# preprocessing


def window_indices(t, w, mode="loop"):
    """Frame indices mapping a T-frame clip onto a fixed W-frame window.

    Short clips repeat cyclically ("loop") or stop at T-1 with a zero tail
    ("zero", handled by the caller); long clips are uniformly subsampled.
    """
    if t == w:
        return np.arange(t)
    if t > w:
        return (np.arange(w) * t) // w
    if mode == "loop":
        return np.arange(w) % t
    if mode == "zero":
        return np.arange(w)  # caller masks indices >= t
    raise ConfigError(f"unknown window pad mode {mode!r}")


def normalize_sequence(seq, topology, window=None, pad_mode="loop"):
    """Center each active person on its first-frame root joint, then window."""
    coords = np.array(seq.coords, dtype=np.float32, copy=True)
    active = person_active(coords)
    for m in np.flatnonzero(active):
        coords[:, :, :, m] -= coords[:, 0:1, topology.root:topology.root + 1, m]
    if window is not None and window != coords.shape[1]:
        t = coords.shape[1]
        if pad_mode == "zero" and t < window:
            out = np.zeros((3, window) + coords.shape[2:], dtype=coords.dtype)
            out[:, :t] = coords
        else:
            out = coords[:, window_indices(t, window, pad_mode)]
        coords = out
    return ActionSequence(coords=coords, label=seq.label, meta=dict(seq.meta))


def factorize_parts(seq, spec):
    """Select each part group's joints, keeping the shared global frame.

    Returns {part: ActionSequence} for the spec's non-empty groups; joint
    order follows the group list. For a local-frame spec (disjoint ablation)
    each group is additionally re-centered on its first joint's first frame.
    """
    out = {}
    n = seq.coords.shape[2]
    for part in spec.active_parts():
        joints = spec.group(part)
        for j in joints:
            if not 0 <= j < n:
                raise IndexError(f"part group {part!r} joint {j} out of range for N={n}")
        coords = seq.coords[:, :, joints, :]
        if spec.local_frame:
            coords = np.array(coords, copy=True)
            for m in np.flatnonzero(person_active(seq.coords)):
                coords[:, :, :, m] -= coords[:, 0:1, 0:1, m]
        out[part] = ActionSequence(coords=coords, label=seq.label, meta=dict(seq.meta))
    return out


# ---------------------------------------------------------------------------
# synthetic part-dominant motions


@dataclass
class SynthSpec:
    """Procedural dataset description: K classes of part-confined motions."""

    topology: str = "ntu25"
    num_classes: int = 8
    train_per_class: int = 16
    val_per_class: int = 8
    frames: int = 32
    persons: int = 1
    amplitude: float = 0.25
    spatial_jitter: float = 0.02
    temporal_noise: float = 0.008

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")


_TAG_CYCLE = ("hands", "legs", "body")
_FREQS = (1.0, 1.5, 2.0, 2.5, 3.0)


def class_tag(c):
    """Which part group dominates class c's motion."""
    return _TAG_CYCLE[c % len(_TAG_CYCLE)]


def rest_pose(topology):
    """Deterministic non-degenerate joint layout for a topology (bone length 0.2)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [0x5E7, topology.num_joints])))
    dirs = rng.standard_normal((topology.num_joints, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pose = np.zeros((topology.num_joints, 3))
    order = sorted(range(topology.num_joints),
                   key=lambda j: _depth(topology.parent, j))
    for j in order:
        p = int(topology.parent[j])
        if p != j:
            pose[j] = pose[p] + 0.2 * dirs[j]
    return pose.astype(np.float32)


def _depth(parent, j):
    d = 0
    while parent[j] != j:
        j = int(parent[j])
        d += 1
    return d


def _mover_pool(spec, topology, tag):
    groups = spec.groups
    if tag == "body":
        pool = set(range(topology.num_joints))
    else:
        pool = set(groups[tag])
    pool.discard(spec.throat_anchor)
    pool.discard(spec.hip_anchor)
    pool.discard(topology.root)
    return sorted(pool)


def _class_params(spec, topology, part_spec, c, seed):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed, 1000 + c])))
    tag = class_tag(c)
    pool = _mover_pool(part_spec, topology, tag)
    k = max(3, len(pool) // 2)
    movers = np.sort(rng.choice(pool, size=min(k, len(pool)), replace=False))
    freq = _FREQS[c % len(_FREQS)]
    dirs = rng.standard_normal((len(movers), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, len(movers))
    return {"tag": tag, "movers": movers, "freq": freq, "dirs": dirs, "phases": phases}


def _sample_sequence(syn, topology, pose, params, c, split_id, i, seed):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed, c, split_id, i])))
    t, n, m = syn.frames, topology.num_joints, syn.persons
    phase = rng.uniform(0, 2 * np.pi)
    amp = syn.amplitude * rng.uniform(0.8, 1.2)
    speed = rng.uniform(0.92, 1.08)
    offsets = rng.normal(0, syn.spatial_jitter, (n, 3)).astype(np.float32)

    coords = np.zeros((3, t, n, m), dtype=np.float32)
    base = (pose + offsets).T[:, None, :]                    # [3,1,N]
    coords[:, :, :, 0] = base
    movers = params["movers"]
    tt = np.arange(t) / t
    wave = np.sin(2 * np.pi * params["freq"] * speed * tt[None, :]
                  + params["phases"][:, None] + phase)       # [k,T]
    motion = amp * params["dirs"][:, :, None] * wave[:, None, :]  # [k,3,T]
    noise = rng.normal(0, syn.temporal_noise, (len(movers), 3, t)).astype(np.float32)
    coords[:, :, movers, 0] += (motion + noise).transpose(1, 2, 0)
    return ActionSequence(coords=coords, label=c, meta={})


def synth_dataset(syn, seed, out_dir):
    """Write a procedural SKJ dataset and its manifest; returns (manifest, path).

    Classes cycle through hand-dominant, leg-dominant and whole-body motion;
    a part-dominant class moves only joints of its group, so the other limb
    group is exactly constant over time. Byte-identical for a fixed seed.
    """
    topology = get_topology(syn.topology)
    part_spec = get_part_spec(syn.topology)
    pose = rest_pose(topology)
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for c in range(syn.num_classes):
        params = _class_params(syn, topology, part_spec, c, seed)
        for split_id, (split, count) in enumerate(
                (("train", syn.train_per_class), ("val", syn.val_per_class))):
            for i in range(count):
                seq = _sample_sequence(syn, topology, pose, params, c, split_id, i, seed)
                name = f"class{c:02d}_{split}_{i:03d}.skj"
                write_skj(os.path.join(out_dir, name), seq, syn.topology)
                items.append(ManifestItem(path=name, label=c, split=split))
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest_path, items)
    return load_manifest(manifest_path), manifest_path
