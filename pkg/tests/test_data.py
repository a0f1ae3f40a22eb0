"""SKJ interchange, manifests, preprocessing, and the synthetic generator."""

import json
import time

import numpy as np
import pytest

from partstream.data import (
    ActionSequence, LoadError, ManifestItem, SynthSpec, class_tag,
    factorize_parts, load_manifest, load_sequence, normalize_sequence,
    person_active, synth_dataset, window_indices, write_manifest, write_skj,
)
from partstream.skeleton import SkeletonTopology, get_part_spec, get_topology
from partstream.tensor import ConfigError


def tiny_topology():
    return SkeletonTopology("ntu25", list(np.zeros(25, dtype=int)))  # star tree


def rand_seq(rng, t=6, n=25, m=1, label=3):
    return ActionSequence(coords=rng.standard_normal((3, t, n, m)).astype(np.float32),
                          label=label)


class TestSkjFormat:
    def test_round_trip_lossless(self, tmp_path):
        rng = np.random.default_rng(0)
        topo = get_topology("ntu25")
        seq = rand_seq(rng, t=7, n=25, m=2)
        path = tmp_path / "a.skj"
        write_skj(path, seq, "ntu25")
        back = load_sequence(path, topo)
        assert np.array_equal(back.coords, seq.coords)
        assert back.label == seq.label

    def test_minimal_single_frame_file(self, tmp_path):
        topo = SkeletonTopology("shrec22", [0, 0, 1] + list(range(2, 21)))
        coords = np.arange(3 * 1 * 22 * 1, dtype=np.float32).reshape(3, 1, 22, 1)
        path = tmp_path / "m.skj"
        write_skj(path, ActionSequence(coords=coords, label=0), "shrec22")
        back = load_sequence(path, topo)
        assert back.coords.shape == (3, 1, 22, 1)

    def test_joint_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.skj"
        coords = np.zeros((3, 2, 24, 1), dtype=np.float32)
        write_skj(path, ActionSequence(coords=coords, label=0), "ntu25")
        with pytest.raises(LoadError, match="'N'"):
            load_sequence(path, get_topology("ntu25"))

    def test_malformed_header_names_field(self, tmp_path):
        path = tmp_path / "x.skj"
        header = {"skj": 1, "topology": "ntu25", "T": 1, "N": 25, "M": 1}
        path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 300)
        with pytest.raises(LoadError, match="'label'"):
            load_sequence(path, get_topology("ntu25"))

    def test_non_finite_payload_rejected(self, tmp_path):
        path = tmp_path / "nan.skj"
        coords = np.zeros((3, 1, 25, 1), dtype=np.float32)
        coords[0, 0, 0, 0] = np.nan
        header = {"skj": 1, "topology": "ntu25", "T": 1, "N": 25, "M": 1, "label": 0}
        payload = np.ascontiguousarray(coords.transpose(1, 2, 3, 0)).astype("<f4")
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload.tobytes())
        with pytest.raises(LoadError, match="non-finite"):
            load_sequence(path, get_topology("ntu25"))

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.skj"
        header = {"skj": 1, "topology": "ntu25", "T": 2, "N": 25, "M": 1, "label": 0}
        path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 10)
        with pytest.raises(LoadError, match="payload"):
            load_sequence(path, get_topology("ntu25"))

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "v9.skj"
        header = {"skj": 9, "topology": "ntu25", "T": 1, "N": 25, "M": 1, "label": 0}
        path.write_bytes(json.dumps(header).encode() + b"\n" + b"\x00" * 300)
        with pytest.raises(LoadError, match="version"):
            load_sequence(path, get_topology("ntu25"))


class TestManifest:
    def test_round_trip_and_classes(self, tmp_path):
        rng = np.random.default_rng(1)
        topo = get_topology("ntu25")
        items = []
        for i in range(4):
            name = f"s{i}.skj"
            write_skj(tmp_path / name, rand_seq(rng, label=i % 2), "ntu25")
            items.append(ManifestItem(path=name, label=i % 2,
                                      split="train" if i < 3 else "val"))
        write_manifest(tmp_path / "manifest.json", items)
        m = load_manifest(tmp_path / "manifest.json")
        assert m.topology == "ntu25"
        assert m.num_classes == 2
        assert len(m.split("train")) == 3
        assert all(load_sequence(it.path, topo) is not None for it in m.items)

    def test_missing_file_rejected(self, tmp_path):
        write_manifest(tmp_path / "manifest.json",
                       [ManifestItem(path="ghost.skj", label=0, split="train")])
        with pytest.raises(LoadError, match="ghost.skj"):
            load_manifest(tmp_path / "manifest.json")


class TestNormalize:
    def test_centered_input_unchanged_up_to_windowing(self):
        rng = np.random.default_rng(2)
        topo = get_topology("ntu25")
        seq = rand_seq(rng, t=6)
        seq.coords[:, 0, topo.root, 0] = 0.0  # already centered at the root
        out = normalize_sequence(seq, topo, window=6)
        assert np.allclose(out.coords, seq.coords, atol=1e-6)

    def test_translation_removed(self):
        rng = np.random.default_rng(3)
        topo = get_topology("ntu25")
        seq = rand_seq(rng, t=5)
        shifted = ActionSequence(coords=seq.coords + np.array([1.0, -2.0, 3.0],
                                                              dtype=np.float32).reshape(3, 1, 1, 1),
                                 label=seq.label)
        a = normalize_sequence(seq, topo)
        b = normalize_sequence(shifted, topo)
        assert np.allclose(a.coords, b.coords, atol=1e-5)

    def test_loop_padding_is_cyclic(self):
        rng = np.random.default_rng(4)
        topo = get_topology("ntu25")
        seq = rand_seq(rng, t=10)
        out = normalize_sequence(seq, topo, window=64)
        centered = normalize_sequence(seq, topo)
        idx = np.arange(64) % 10
        assert np.array_equal(out.coords, centered.coords[:, idx])

    def test_window_indices_oracle(self):
        assert np.array_equal(window_indices(10, 64), np.arange(64) % 10)
        assert np.array_equal(window_indices(5, 5), np.arange(5))
        sub = window_indices(100, 10)
        assert np.array_equal(sub, (np.arange(10) * 100) // 10)

    def test_zero_padding_mode(self):
        rng = np.random.default_rng(5)
        topo = get_topology("ntu25")
        seq = rand_seq(rng, t=4)
        out = normalize_sequence(seq, topo, window=8, pad_mode="zero")
        assert np.all(out.coords[:, 4:] == 0)

    def test_padded_person_stays_zero(self):
        rng = np.random.default_rng(6)
        topo = get_topology("ntu25")
        coords = np.zeros((3, 4, 25, 2), dtype=np.float32)
        coords[:, :, :, 0] = rng.standard_normal((3, 4, 25))
        out = normalize_sequence(ActionSequence(coords=coords, label=0), topo)
        assert np.all(out.coords[:, :, :, 1] == 0)
        assert np.array_equal(person_active(out.coords), [True, False])


class TestFactorize:
    def test_group_joint_counts(self):
        rng = np.random.default_rng(7)
        spec = get_part_spec("ntu25")
        parts = factorize_parts(rand_seq(rng), spec)
        assert parts["body"].joints == 25
        assert parts["hands"].joints == 13
        assert parts["legs"].joints == 9

    def test_ntux67_counts(self):
        rng = np.random.default_rng(8)
        seq = rand_seq(rng, n=67)
        parts = factorize_parts(seq, get_part_spec("ntux67"))
        assert (parts["body"].joints, parts["hands"].joints,
                parts["legs"].joints) == (37, 48, 13)

    @pytest.mark.parametrize("name,joints", [("ntu25", 25), ("ntux67", 67)])
    def test_shared_joints_identical_across_groups(self, name, joints):
        # global registration: every joint two groups share carries the same
        # coordinates in both factorized outputs
        rng = np.random.default_rng(9)
        spec = get_part_spec(name)
        seq = rand_seq(rng, n=joints)
        parts = factorize_parts(seq, spec)
        names = list(parts)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                shared = set(spec.group(a)) & set(spec.group(b))
                for j in shared:
                    ia = spec.group(a).index(j)
                    ib = spec.group(b).index(j)
                    assert np.array_equal(parts[a].coords[:, :, ia],
                                          parts[b].coords[:, :, ib])

    def test_empty_groups_skipped(self):
        rng = np.random.default_rng(10)
        seq = rand_seq(rng, n=22)
        parts = factorize_parts(seq, get_part_spec("shrec22"))
        assert list(parts) == ["hands"]

    def test_out_of_range_group(self):
        rng = np.random.default_rng(11)
        spec = get_part_spec("ntu25")
        seq = rand_seq(rng, n=9)
        with pytest.raises(IndexError):
            factorize_parts(seq, spec)


class TestSynth:
    def test_hand_dominant_classes_freeze_legs(self, tmp_path):
        manifest, _ = synth_dataset(SynthSpec(num_classes=4, train_per_class=2,
                                              val_per_class=1), 0, tmp_path / "d")
        topo = get_topology("ntu25")
        legs = get_part_spec("ntu25").group("legs")
        for it in manifest.items:
            if class_tag(it.label) != "hands":
                continue
            seq = load_sequence(it.path, topo)
            var = seq.coords[:, :, legs, 0].var(axis=1).max()
            assert var < 1e-8

    def test_leg_dominant_classes_freeze_hands(self, tmp_path):
        manifest, _ = synth_dataset(SynthSpec(num_classes=4, train_per_class=2,
                                              val_per_class=1), 0, tmp_path / "d")
        topo = get_topology("ntu25")
        hands = get_part_spec("ntu25").group("hands")
        for it in manifest.items:
            if class_tag(it.label) != "legs":
                continue
            seq = load_sequence(it.path, topo)
            assert seq.coords[:, :, hands, 0].var(axis=1).max() < 1e-8

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SynthSpec(num_classes=3, train_per_class=2, val_per_class=1)
        _, p1 = synth_dataset(spec, 7, tmp_path / "a")
        _, p2 = synth_dataset(spec, 7, tmp_path / "b")
        m1, m2 = load_manifest(p1), load_manifest(p2)
        for a, b in zip(m1.items, m2.items):
            assert open(a.path, "rb").read() == open(b.path, "rb").read()

    def test_different_seed_differs(self, tmp_path):
        spec = SynthSpec(num_classes=2, train_per_class=1, val_per_class=1)
        _, p1 = synth_dataset(spec, 0, tmp_path / "a")
        _, p2 = synth_dataset(spec, 1, tmp_path / "b")
        a = load_manifest(p1).items[0]
        b = load_manifest(p2).items[0]
        assert open(a.path, "rb").read() != open(b.path, "rb").read()

    def test_generation_speed(self, tmp_path):
        t0 = time.time()
        synth_dataset(SynthSpec(num_classes=8, train_per_class=16, val_per_class=0,
                                frames=32), 0, tmp_path / "d")
        assert time.time() - t0 < 5.0

    def test_too_few_classes_rejected(self):
        with pytest.raises(ConfigError):
            SynthSpec(num_classes=1)
