"""Gradient-free terrain selection.

Propagates nominal footholds with the commanded velocity, builds a layered
sample tree of candidate tiles per same-phase foot group (weighted by the
tile area inside each foot's kinematic-limit circle), and draws terrain
combinations without replacement. Feet whose nominal point already lies on
a tile keep that tile in every sample, which shrinks the sample space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .liegroup import quat_to_matrix
from .terrain import (
    EmptyRegionError,
    FootholdAssignment,
    Terrain,
    circle_intersection_area,
    shrink,
)


@dataclass
class NominalFoothold:
    """Raibert-style nominal: hip projection at mid-stance of one phase."""

    ee: int
    phase: int
    xy: np.ndarray
    radius: float
    touchdown: float = 0.0
    liftoff: float = 0.0


@dataclass
class SampleTree:
    """Layered candidate tiles for one same-phase foot group; each
    root-to-leaf branch is a unique terrain combination."""

    feet: list            # ee index per layer
    candidates: list      # per layer: list of (tile_id, clipped area)
    _remaining: set = field(default_factory=set)

    def __post_init__(self):
        if not self._remaining:
            ids = [[tid for tid, _ in layer] for layer in self.candidates]
            self._remaining = set(itertools.product(*ids)) if all(ids) else set()

    @property
    def depth(self) -> int:
        return len(self.feet) + 1  # dummy root + one layer per foot

    def n_branches(self) -> int:
        return len(self._remaining)

    def has_branches(self) -> bool:
        return bool(self._remaining)

    def remove(self, branch):
        self._remaining.discard(tuple(branch))

    def area_of(self, layer, tile_id):
        for tid, area in self.candidates[layer]:
            if tid == tile_id:
                return area
        raise KeyError(tile_id)


def sample_branch(tree: SampleTree, rng: np.random.Generator):
    """Draw one branch: per layer, normalize the remaining children's
    clipped areas, pick the segment containing a uniform draw, descend.
    The branch is removed so it cannot be sampled again."""
    if not tree.has_branches():
        raise ValueError("sample tree is exhausted")
    prefix = ()
    for layer in range(len(tree.feet)):
        children = sorted({br[layer] for br in tree._remaining
                           if br[:layer] == prefix})
        areas = np.array([tree.area_of(layer, tid) for tid in children])
        w = areas / areas.sum()
        a = rng.uniform()
        idx = int(np.searchsorted(np.cumsum(w), a, side="right"))
        idx = min(idx, len(children) - 1)
        prefix = prefix + (children[idx],)
    tree.remove(prefix)
    return prefix


class TerrainSampler:
    """Foothold sampling for one robot model over one terrain."""

    def __init__(self, model, terrain: Terrain, kinematic_radius: float = 0.18,
                 shrink_margin: float = 0.03):
        self.model = model
        self.terrain = terrain
        self.radius = float(kinematic_radius)
        self.margin = float(shrink_margin)
        nom = model.nominal_state()
        from .dynamics import ee_positions

        feet = ee_positions(model, nom.q)
        self._hip_xy = feet[:, 0:2] - nom.q[0:2][None, :]

    # -- nominal propagation ------------------------------------------------

    def nominal_footholds(self, state, v_cmd, schedule, t_now, horizon):
        """Nominals for stance phases touching the look-ahead window.

        The torso is propagated in the plane at the commanded body-frame
        velocity (rotated by the current yaw); each nominal is the hip
        projection at the phase's mid-stance time.
        """
        R = quat_to_matrix(state.base_quat)
        yaw = np.arctan2(R[1, 0], R[0, 0])
        cz, sz = np.cos(yaw), np.sin(yaw)
        v_world = np.array([cz * v_cmd[0] - sz * v_cmd[1],
                            sz * v_cmd[0] + cz * v_cmd[1]])
        base_xy = state.base_pos[0:2]
        out = []
        for l in range(self.model.n_ee):
            hip = np.array([cz * self._hip_xy[l, 0] - sz * self._hip_xy[l, 1],
                            sz * self._hip_xy[l, 0] + cz * self._hip_xy[l, 1]])
            for pid, td, lo in schedule.phases_in_window(l, t_now,
                                                         t_now + horizon):
                if td <= t_now or pid == 0:
                    continue  # active or initial phase: foothold already set
                t_mid = 0.5 * (td + min(lo, td + 10.0))
                xy = base_xy + v_world * (t_mid - t_now) + hip
                out.append(NominalFoothold(ee=l, phase=pid, xy=xy,
                                           radius=self.radius,
                                           touchdown=td, liftoff=lo))
        return out

    # -- tree construction ----------------------------------------------------

    def build_sample_tree(self, nominals: list) -> SampleTree:
        """Candidate tiles per foot: any tile with nonzero clipped area
        inside the foot's kinematic circle."""
        if not nominals:
            raise ValueError("need at least one foot to build a tree")
        feet, layers = [], []
        for nom in nominals:
            cands = []
            for tile in self.terrain.tiles:
                area = circle_intersection_area(tile, nom.xy, nom.radius)
                if area > 0.0:
                    cands.append((tile.id, area))
            feet.append(nom.ee)
            layers.append(cands)
        return SampleTree(feet=feet, candidates=layers)

    # -- full sampling pass ---------------------------------------------------

    def terrain_sampling(self, M: int, nominals: list, rng,
                         incumbent: dict | None = None) -> list:
        """M bags of foothold assignments keyed by (ee, phase id).

        Per same-phase group: feet whose nominal lies on a tile keep that
        tile in all bags; the rest are drawn from the sample tree without
        replacement, with the incumbent combination (last tick's winner)
        reserved as bag 0 and uniform-random tiles once the tree is
        exhausted. Feet with no candidate tile at all yield an
        unconstrained, flagged assignment.
        """
        if M < 1:
            raise ValueError("need at least one sample")
        bags = [dict() for _ in range(M)]
        groups = {}
        for nom in nominals:
            groups.setdefault((round(nom.touchdown, 6), round(nom.liftoff, 6)),
                              []).append(nom)
        for _, group in sorted(groups.items()):
            fixed, sampled = [], []
            for nom in group:
                tile = self.terrain.tile_at(nom.xy)
                if tile is not None:
                    fixed.append((nom, tile.id))
                else:
                    sampled.append(nom)
            for nom, tid in fixed:
                for b in bags:
                    b[(nom.ee, nom.phase)] = self._assignment(nom, tid)
            if not sampled:
                continue
            tree = self.build_sample_tree(sampled)
            empty_feet = [i for i, layer in enumerate(tree.candidates)
                          if not layer]
            if empty_feet:
                for i in empty_feet:
                    nom = sampled[i]
                    for b in bags:
                        b[(nom.ee, nom.phase)] = FootholdAssignment(
                            ee=nom.ee, phase=nom.phase, tile_id=-1,
                            A=np.zeros((0, 2)), b=np.zeros(0), z=0.0,
                            constrained=False)
                sampled = [nom for i, nom in enumerate(sampled)
                           if i not in empty_feet]
                if not sampled:
                    continue
                tree = self.build_sample_tree(sampled)
            start = 0
            if incumbent is not None:
                combo = tuple(incumbent.get((nom.ee, nom.phase))
                              for nom in sampled)
                if all(t is not None for t in combo) and \
                        tuple(combo) in tree._remaining:
                    for i, nom in enumerate(sampled):
                        bags[0][(nom.ee, nom.phase)] = self._assignment(
                            nom, combo[i])
                    tree.remove(combo)
                    start = 1
            for j in range(start, M):
                if tree.has_branches():
                    branch = sample_branch(tree, rng)
                else:
                    # more samples than unique terrain options: random tiles
                    branch = tuple(
                        tree.candidates[i][rng.integers(len(tree.candidates[i]))][0]
                        for i in range(len(sampled)))
                for i, nom in enumerate(sampled):
                    bags[j][(nom.ee, nom.phase)] = self._assignment(nom,
                                                                    branch[i])
        return bags

    def _assignment(self, nom: NominalFoothold, tile_id) -> FootholdAssignment:
        tile = self.terrain.tile(tile_id)
        try:
            A, b = shrink(tile, self.margin)
        except EmptyRegionError:
            A, b = shrink(tile, 0.0)  # tiny tile: constrain to the full face
        return FootholdAssignment(ee=nom.ee, phase=nom.phase, tile_id=tile_id,
                                  A=A, b=b, z=tile.z)
