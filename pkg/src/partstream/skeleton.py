"""Skeleton topologies, part-group definitions, and normalized adjacency.

Three built-in joint layouts ship with the package:

* ``ntu25``  — 25-joint full body (Kinect-style).
* ``ntux67`` — 67-joint dense body: a 25-joint core plus 21 finger joints
  per hand (wrist + thumb 4 + four fingers of 4).
* ``shrec22`` — 22-joint single hand (wrist, palm, five finger chains).

Part groups deliberately overlap: the coarse body group covers the whole
skeleton (minus intermediate finger joints on ntux67), the hands group is the
two arm+finger chains bridged by the throat joint, and the legs group is both
leg chains bridged by the hip. All groups keep the shared global coordinate
frame; the overlap is what lets global motion reach every stream.
"""

import numpy as np

from .tensor import ConfigError

__all__ = [
    "SkeletonTopology", "PartGroupSpec", "Subgraph", "PARTS",
    "get_topology", "get_part_spec", "disjoint_part_spec",
    "part_subgraph", "build_adjacency", "TOPOLOGY_NAMES",
]

PARTS = ("body", "hands", "legs")


class SkeletonTopology:
    """A joint tree: parent[i] is i's parent, the root points at itself."""

    def __init__(self, name, parent):
        self.name = name
        self.parent = np.asarray(parent, dtype=np.intp)
        self.num_joints = len(self.parent)
        roots = np.flatnonzero(self.parent == np.arange(self.num_joints))
        if len(roots) != 1:
            raise ConfigError(f"topology {name!r} must have exactly one root, found {len(roots)}")
        self.root = int(roots[0])
        self._check_tree()
        self.edges = [(i, int(self.parent[i]))
                      for i in range(self.num_joints) if i != self.root]

    def _check_tree(self):
        for i in range(self.num_joints):
            seen, j = set(), i
            while j != self.parent[j]:
                if j in seen:
                    raise ConfigError(f"topology {self.name!r} has a parent cycle at joint {i}")
                seen.add(j)
                j = int(self.parent[j])


class PartGroupSpec:
    """Joint-index subsets for the body/hands/legs streams of one topology.

    Groups may overlap and may be empty (an empty group simply has no stream).
    ``local_frame`` marks the disjoint-parts ablation variant, where each
    group is re-centered on its own first joint instead of the global root.
    """

    def __init__(self, topology_name, body, hands, legs, throat_anchor=None,
                 hip_anchor=None, local_frame=False, allow_disconnected=False):
        self.topology_name = topology_name
        self.groups = {"body": list(body), "hands": list(hands), "legs": list(legs)}
        self.throat_anchor = throat_anchor
        self.hip_anchor = hip_anchor
        self.local_frame = local_frame
        self.allow_disconnected = allow_disconnected
        if hands and throat_anchor is not None and throat_anchor not in hands:
            raise ConfigError("throat anchor is not a member of the hands group")
        if legs and hip_anchor is not None and hip_anchor not in legs:
            raise ConfigError("hip anchor is not a member of the legs group")

    def group(self, part):
        return self.groups[part]

    def active_parts(self):
        return [p for p in PARTS if self.groups[p]]


class Subgraph:
    """A part group cut out of a topology, with locally re-indexed parents."""

    def __init__(self, joints, parent, name=""):
        self.joints = np.asarray(joints, dtype=np.intp)
        self.parent = np.asarray(parent, dtype=np.intp)
        self.num_joints = len(self.joints)
        self.name = name


def part_subgraph(topology, joints, name=""):
    """Restrict a topology to `joints`; parents outside the group become self-links."""
    joints = list(joints)
    index = {j: i for i, j in enumerate(joints)}
    if len(index) != len(joints):
        raise ConfigError(f"duplicate joint in part group {name!r}")
    parent = np.empty(len(joints), dtype=np.intp)
    for i, j in enumerate(joints):
        if not 0 <= j < topology.num_joints:
            raise IndexError(f"joint {j} out of range for topology {topology.name!r}")
        pj = int(topology.parent[j])
        parent[i] = index.get(pj, i)
    return Subgraph(joints, parent, name=name)


def build_adjacency(graph, allow_disconnected=False):
    """Symmetrically normalized adjacency with self-loops.

    Takes a SkeletonTopology, a Subgraph, or a raw parent array and returns
    D^{-1/2} (A + I) D^{-1/2} as float64. A disconnected group is rejected
    unless explicitly allowed (the disjoint-parts ablation needs forests).
    """
    if isinstance(graph, (SkeletonTopology, Subgraph)):
        parent = graph.parent
    else:
        parent = np.asarray(graph, dtype=np.intp)
    n = len(parent)
    roots = np.flatnonzero(parent == np.arange(n))
    if len(roots) == 0:
        raise ConfigError("parent array has no root")
    if len(roots) > 1 and not allow_disconnected:
        raise ConfigError(
            f"part subgraph is disconnected ({len(roots)} components); "
            "check the group's anchor joints")
    a = np.eye(n, dtype=np.float64)
    for i in range(n):
        p = int(parent[i])
        if p != i:
            a[i, p] = 1.0
            a[p, i] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


# ---------------------------------------------------------------------------
# built-in layouts


def _ntu25():
    # 0 spine_base 1 spine_mid 2 neck 3 head 4-7 left arm 8-11 right arm
    # 12-15 left leg 16-19 right leg 20 spine_shoulder 21/22 l tip+thumb
    # 23/24 r tip+thumb
    parent = [0, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10,
              0, 12, 13, 14, 0, 16, 17, 18, 1, 7, 7, 11, 11]
    return SkeletonTopology("ntu25", parent)


def _ntu25_parts():
    hands = [20, 4, 5, 6, 7, 21, 22, 8, 9, 10, 11, 23, 24]
    legs = [0, 12, 13, 14, 15, 16, 17, 18, 19]
    return PartGroupSpec("ntu25", body=list(range(25)), hands=hands, legs=legs,
                         throat_anchor=20, hip_anchor=0)


def _ntux67():
    parent = [0] * 67
    # spine and head chain
    parent[0] = 0
    parent[1], parent[2], parent[3], parent[4] = 0, 1, 2, 3
    parent[5], parent[6], parent[7], parent[8] = 4, 5, 6, 6
    # shoulders and elbows hang off the throat (4)
    parent[9], parent[10] = 4, 9
    parent[11], parent[12] = 4, 11
    # legs: hip, knee, ankle, heel, foot, toe per side
    parent[13], parent[14], parent[15] = 0, 13, 14
    parent[16], parent[17], parent[18] = 15, 15, 17
    parent[19], parent[20], parent[21] = 0, 19, 20
    parent[22], parent[23], parent[24] = 21, 21, 23
    # hand clusters: wrist + five 4-joint finger chains
    for wrist, elbow in ((25, 10), (46, 12)):
        parent[wrist] = elbow
        for f in range(5):
            base = wrist + 1 + 4 * f
            parent[base] = wrist
            for k in range(1, 4):
                parent[base + k] = base + k - 1
    return SkeletonTopology("ntux67", parent)


def _ntux67_parts():
    core = list(range(25))
    # body keeps the wrist and the five finger-base joints of each hand
    kept = [w + off for w in (25, 46) for off in (0, 1, 5, 9, 13, 17)]
    body = core + kept
    hands = [4, 5, 9, 10, 11, 12] + list(range(25, 46)) + list(range(46, 67))
    legs = [0] + list(range(13, 19)) + list(range(19, 25))
    return PartGroupSpec("ntux67", body=body, hands=hands, legs=legs,
                         throat_anchor=4, hip_anchor=0)


def _shrec22():
    # 0 wrist 1 palm; thumb roots at the wrist, other fingers at the palm
    parent = [0, 0, 0, 2, 3, 4]
    for f in range(4):
        base = 6 + 4 * f
        parent += [1, base, base + 1, base + 2]
    return SkeletonTopology("shrec22", parent)


def _shrec22_parts():
    # a hand-gesture skeleton is consumed by the hands stream alone
    return PartGroupSpec("shrec22", body=[], hands=list(range(22)), legs=[],
                         throat_anchor=0, hip_anchor=None)


_BUILDERS = {
    "ntu25": (_ntu25, _ntu25_parts),
    "ntux67": (_ntux67, _ntux67_parts),
    "shrec22": (_shrec22, _shrec22_parts),
}
TOPOLOGY_NAMES = tuple(_BUILDERS)


def get_topology(name):
    try:
        return _BUILDERS[name][0]()
    except KeyError:
        raise ConfigError(f"unknown topology {name!r}; known: {', '.join(_BUILDERS)}") from None


def get_part_spec(name):
    try:
        return _BUILDERS[name][1]()
    except KeyError:
        raise ConfigError(f"unknown topology {name!r}; known: {', '.join(_BUILDERS)}") from None


def disjoint_part_spec(name):
    """Non-overlapping, locally rooted part groups (the ablation grouping).

    Left and right limbs are intentionally not bridged, so the hands and legs
    groups are two-component forests and each group is re-centered locally.
    Only defined for ntu25.
    """
    if name != "ntu25":
        raise ConfigError(f"disjoint part grouping is only defined for ntu25, not {name!r}")
    torso = [0, 1, 20, 2, 3]
    hands = [4, 5, 6, 7, 21, 22, 8, 9, 10, 11, 23, 24]
    legs = [12, 13, 14, 15, 16, 17, 18, 19]
    return PartGroupSpec("ntu25", body=torso, hands=hands, legs=legs,
                         throat_anchor=None, hip_anchor=None,
                         local_frame=True, allow_disconnected=True)
