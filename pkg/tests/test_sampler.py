import numpy as np
import pytest
import scipy.stats

from stepstone.liegroup import State, config_oplus
from stepstone.sampler import NominalFoothold, SampleTree, TerrainSampler, sample_branch
from stepstone.terrain import Terrain, TerrainTile
from stepstone.transcription import ContactSchedule

SQ = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])


def square(tid, cx, cy, side=1.0, z=0.0):
    half = side / 2
    v = np.array([[cx - half, cy - half], [cx + half, cy - half],
                  [cx + half, cy + half], [cx - half, cy + half]])
    return TerrainTile(tid, v, z)


def make_sampler(quadruped, tiles, radius=0.18):
    return TerrainSampler(quadruped, Terrain(tiles), kinematic_radius=radius)


def nominal(ee=0, phase=1, xy=(0.0, 0.0), radius=0.18, td=1.0, lo=1.3):
    return NominalFoothold(ee=ee, phase=phase, xy=np.array(xy, float),
                           radius=radius, touchdown=td, liftoff=lo)


class TestNominalFootholds:
    def test_zero_velocity_under_hips(self, quadruped):
        s = make_sampler(quadruped, [square(0, 0, 0, side=20.0)])
        sched = ContactSchedule.trot(stand_until=0.2)
        x = quadruped.nominal_state()
        noms = s.nominal_footholds(x, np.zeros(2), sched, t_now=0.0,
                                   horizon=0.9)
        assert noms
        hips = {0: (0.19, 0.135), 1: (0.19, -0.135),
                2: (-0.19, 0.135), 3: (-0.19, -0.135)}
        for nom in noms:
            np.testing.assert_allclose(nom.xy, hips[nom.ee], atol=1e-9)

    def test_forward_command_shifts_by_midstance(self, quadruped):
        s = make_sampler(quadruped, [square(0, 0, 0, side=20.0)])
        # one phase: touchdown 0.4, liftoff 0.6 -> mid-stance 0.5 s ahead
        sched = ContactSchedule(n_ee=4, stand_until=0.0, period=10.0,
                                offsets=np.full(4, 0.4),
                                stance_time=np.full(4, 0.2))
        x = quadruped.nominal_state()
        noms = s.nominal_footholds(x, np.array([0.7, 0.0]), sched,
                                   t_now=0.0, horizon=0.45)
        assert noms
        for nom in noms:
            hip_x = 0.19 if nom.ee in (0, 1) else -0.19
            np.testing.assert_allclose(nom.xy[0], hip_x + 0.35, atol=1e-9)

    def test_yawed_base_body_frame_command(self, quadruped):
        s = make_sampler(quadruped, [square(0, 0, 0, side=20.0)])
        sched = ContactSchedule(n_ee=4, stand_until=0.0, period=10.0,
                                offsets=np.full(4, 0.4),
                                stance_time=np.full(4, 0.2))
        x = quadruped.nominal_state()
        dq = np.zeros(quadruped.n_v)
        dq[5] = np.pi / 2  # yaw 90 degrees
        q = config_oplus(x.q, dq)
        noms = s.nominal_footholds(State(q, x.v), np.array([0.7, 0.0]), sched,
                                   t_now=0.0, horizon=0.45)
        for nom in noms:
            hip_y = 0.19 if nom.ee in (0, 1) else -0.19  # hips rotate too
            np.testing.assert_allclose(nom.xy[1], hip_y + 0.35, atol=1e-9)


class TestSampleTree:
    def test_two_feet_three_tiles_nine_branches(self, quadruped):
        tiles = [square(i, 0.3 * i, 0.0, side=0.25) for i in range(3)]
        s = make_sampler(quadruped, tiles, radius=1.0)
        noms = [nominal(ee=0, xy=(0.3, 0.0)), nominal(ee=1, xy=(0.3, 0.0))]
        tree = s.build_sample_tree(noms)
        assert tree.depth == 3
        assert tree.n_branches() == 9

    def test_single_foot_single_tile(self, quadruped):
        s = make_sampler(quadruped, [square(5, 0, 0)])
        tree = s.build_sample_tree([nominal(xy=(0, 0))])
        assert tree.n_branches() == 1
        assert sample_branch(tree, np.random.default_rng(0)) == (5,)

    def test_tile_outside_circle_absent(self, quadruped):
        tiles = [square(0, 0, 0, side=0.2), square(1, 5.0, 0, side=0.2)]
        s = make_sampler(quadruped, tiles, radius=0.3)
        tree = s.build_sample_tree([nominal(xy=(0, 0), radius=0.3)])
        ids = [tid for tid, _ in tree.candidates[0]]
        assert ids == [0]


class TestSampleBranch:
    def test_area_weighted_frequencies(self, quadruped):
        # 0.75 / 0.25 clipped-area split within the circle
        tiles = [square(0, 0.0, 0.0, side=2.0), square(1, 0, 0, side=2.0)]
        s = make_sampler(quadruped, tiles)
        rng = np.random.default_rng(7)
        counts = {0: 0, 1: 0}
        tree0 = SampleTree(feet=[0], candidates=[[(0, 0.75), (1, 0.25)]])
        for _ in range(10_000):
            tree = SampleTree(feet=[0], candidates=[[(0, 0.75), (1, 0.25)]])
            counts[sample_branch(tree, rng)[0]] += 1
        f0 = counts[0] / 10_000
        assert abs(f0 - 0.75) <= 0.02

    def test_chi_square_weighting(self, quadruped):
        areas = [0.5, 0.3, 0.15, 0.05]
        rng = np.random.default_rng(11)
        counts = np.zeros(4)
        for _ in range(10_000):
            tree = SampleTree(feet=[0],
                              candidates=[[(i, a) for i, a in enumerate(areas)]])
            counts[sample_branch(tree, rng)[0]] += 1
        _, p = scipy.stats.chisquare(counts, 10_000 * np.array(areas))
        assert p > 0.01

    def test_removal_gives_distinct_branches(self, quadruped):
        tree = SampleTree(feet=[0, 1],
                          candidates=[[(0, 1.0), (1, 1.0)],
                                      [(2, 1.0), (3, 1.0)]])
        rng = np.random.default_rng(3)
        drawn = {sample_branch(tree, rng) for _ in range(4)}
        assert len(drawn) == 4
        assert not tree.has_branches()
        with pytest.raises(ValueError):
            sample_branch(tree, rng)


class TestTerrainSampling:
    def test_nominal_on_tile_fixes_choice(self, quadruped):
        s = make_sampler(quadruped, [square(0, 0, 0), square(1, 2.0, 0)])
        bags = s.terrain_sampling(4, [nominal(xy=(0.1, 0.1))],
                                  np.random.default_rng(0))
        assert len(bags) == 4
        for b in bags:
            assert b[(0, 1)].tile_id == 0

    def test_nine_branch_tree_four_distinct(self, quadruped):
        tiles = [square(i, 0.25 * i, 0.0, side=0.2) for i in range(3)]
        s = make_sampler(quadruped, tiles, radius=0.4)
        noms = [nominal(ee=0, xy=(0.25, 0.11), radius=0.4),
                nominal(ee=1, xy=(0.25, -0.11), radius=0.4)]
        # nudge nominals off any tile so sampling happens
        noms[0].xy[1] = 0.35
        noms[1].xy[1] = -0.35
        bags = s.terrain_sampling(4, noms, np.random.default_rng(1))
        combos = [tuple(b[(l, 1)].tile_id for l in (0, 1)) for b in bags]
        assert len(set(combos)) == 4

    def test_exhausted_tree_falls_back_to_random(self, quadruped):
        tiles = [square(0, 0, 0.4, side=0.3), square(1, 0, -0.4, side=0.3)]
        s = make_sampler(quadruped, tiles, radius=0.35)
        nom = nominal(xy=(0.0, 0.0), radius=0.35)  # overlaps both, on neither
        bags = s.terrain_sampling(4, [nom], np.random.default_rng(2))
        ids = [b[(0, 1)].tile_id for b in bags]
        assert set(ids[:2]) == {0, 1}   # two unique branches first
        assert all(i in (0, 1) for i in ids[2:])  # then uniform random tiles

    def test_incumbent_reserved_as_first_bag(self, quadruped):
        tiles = [square(0, 0, 0.4, side=0.3), square(1, 0, -0.4, side=0.3)]
        s = make_sampler(quadruped, tiles, radius=0.35)
        nom = nominal(xy=(0.0, 0.0), radius=0.35)
        bags = s.terrain_sampling(2, [nom], np.random.default_rng(3),
                                  incumbent={(0, 1): 1})
        assert bags[0][(0, 1)].tile_id == 1
        assert bags[1][(0, 1)].tile_id == 0  # only remaining branch

    def test_no_candidates_flagged_unconstrained(self, quadruped):
        s = make_sampler(quadruped, [square(0, 50.0, 0)])
        bags = s.terrain_sampling(2, [nominal(xy=(0, 0))],
                                  np.random.default_rng(4))
        for b in bags:
            assert not b[(0, 1)].constrained

    def test_determinism_fixed_seed(self, quadruped):
        tiles = [square(i, 0.25 * i, 0.3, side=0.2) for i in range(4)]
        s = make_sampler(quadruped, tiles, radius=0.5)
        nom = nominal(xy=(0.4, 0.0), radius=0.5)
        a = s.terrain_sampling(4, [nom], np.random.default_rng(42))
        b = s.terrain_sampling(4, [nom], np.random.default_rng(42))
        ids_a = [bag[(0, 1)].tile_id for bag in a]
        ids_b = [bag[(0, 1)].tile_id for bag in b]
        assert ids_a == ids_b

    def test_first_min_m_branches_distinct(self, quadruped):
        tiles = [square(i, 0.25 * i, 0.3, side=0.2) for i in range(3)]
        s = make_sampler(quadruped, tiles, radius=0.5)
        nom = nominal(xy=(0.3, 0.0), radius=0.5)
        bags = s.terrain_sampling(5, [nom], np.random.default_rng(5))
        ids = [b[(0, 1)].tile_id for b in bags]
        assert len(set(ids[:3])) == 3
