"""Layered controller: sampled-terrain MPC instances raced per tick.

The preparation phase shifts the shared warm start, samples terrain
combinations (bag 0 reserved for the incumbent), and caches the node
linearizations once (identical across instances because the winner is
broadcast). The feedback phase assembles one QP per sample, solves them
concurrently, ranks the updated trajectories by the nonlinear tracking
cost plus the soft-constraint penalty, and broadcasts the winner as the
next warm start. Heuristic mode forces a single instance with
nearest-tile foothold selection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .dynamics import RobotModel
from .liegroup import State
from .mpc import CostWeights, MpcConfig, MpcInstance, MpcSolution, ReferenceBuilder
from .sampler import NominalFoothold, TerrainSampler
from .terrain import FootholdAssignment, Terrain, point_polygon_distance, shrunk_vertices
from .transcription import ContactSchedule, make_stage_context


@dataclass
class LayeredTickResult:
    solutions: list            # per-sample MpcSolution
    bags: list                 # per-sample foothold assignments
    chosen: int                # index of the winning sample
    winner: MpcSolution
    degraded: bool = False     # every sample diverged; previous winner held
    prep_time: float = 0.0
    fb_time: float = 0.0

    @property
    def ranking_costs(self):
        return [s.ranking_cost for s in self.solutions]


class LayeredController:
    """Runs M fixed-mode MPC instances on sampled polytope bags."""

    def __init__(self, model: RobotModel, terrain: Terrain,
                 schedule: ContactSchedule, config: MpcConfig = None,
                 samples: int = 4, mode: str = "sampling", seed: int = 0,
                 parallel: bool = True):
        if samples < 1:
            raise ValueError("need at least one sample")
        if mode not in ("sampling", "heuristic"):
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model
        self.terrain = terrain
        self.schedule = schedule
        self.config = config or MpcConfig()
        if self.config.weights is None:
            self.config.weights = CostWeights.default(model)
        self.mode = mode
        self.M = 1 if mode == "heuristic" else samples
        self.parallel = parallel
        self.rng = np.random.default_rng(seed)
        self.sampler = TerrainSampler(
            model, terrain, kinematic_radius=self.config.kinematic_radius,
            shrink_margin=self.config.shrink_margin)
        self.refs_builder = ReferenceBuilder(
            model, self.config,
            base_height=float(model.nominal.get("base_height", 0.3)))
        self.instances = [MpcInstance(model, self.config, index=i)
                          for i in range(self.M)]
        self.guess = None
        self.incumbent: dict = {}
        self.last_result: LayeredTickResult | None = None

    # -- foothold selection ---------------------------------------------------

    def heuristic_assignment(self, nominals: list) -> dict:
        """Raibert-style baseline: the tile containing each nominal point,
        else the tile whose shrunk polygon is nearest to it."""
        bag = {}
        for nom in nominals:
            tile = self.terrain.tile_at(nom.xy)
            if tile is None:
                best, best_d = None, np.inf
                for cand in self.terrain.tiles:
                    poly = shrunk_vertices(cand, self.config.shrink_margin)
                    if poly is None:
                        poly = cand.vertices
                    d = point_polygon_distance(nom.xy, poly)
                    if d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12
                                              and best is not None
                                              and cand.id < best.id):
                        best, best_d = cand, d
                tile = best
            if tile is None:
                bag[(nom.ee, nom.phase)] = FootholdAssignment(
                    ee=nom.ee, phase=nom.phase, tile_id=-1,
                    A=np.zeros((0, 2)), b=np.zeros(0), z=0.0,
                    constrained=False)
            else:
                bag[(nom.ee, nom.phase)] = self.sampler._assignment(nom, tile.id)
        return bag

    # -- one controller tick ----------------------------------------------------

    def tick(self, x_meas: State, t_meas: float, v_cmd) -> LayeredTickResult:
        t_prep0 = time.perf_counter()
        if self.guess is None:
            from .transcription import TrajectoryGuess

            self.guess = TrajectoryGuess.stand(self.model, x_meas, t0=t_meas)
        shifted = self.guess.shifted(t_meas)
        state_pred = shifted.state(0)
        times = shifted.node_times
        horizon = float(times[-1] - times[0])

        nominals = self.sampler.nominal_footholds(
            state_pred, v_cmd[:2], self.schedule, t_meas, horizon)
        heur_bag = self.heuristic_assignment(nominals)
        if self.mode == "heuristic":
            bags = [heur_bag]
        else:
            bags = self.sampler.terrain_sampling(self.M, nominals, self.rng,
                                                 incumbent=self.incumbent)
        refs = self.refs_builder.build(shifted, state_pred, v_cmd,
                                       self.schedule, nominals, heur_bag,
                                       self.config.weights)
        # node linearizations are identical across instances (shared warm
        # start); compute them once and hand them to every prepare
        lead = self.instances[0]
        kins = [None] * (shifted.N + 1)
        idds = [None] * shifted.N
        for k in range(1, shifted.N + 1):
            nl = lead.trans.node_lin(shifted, k, with_dynamics=(k < shifted.N))
            kins[k] = nl.kin
            if k < shifted.N:
                idds[k] = nl.idd
        ctxs = []
        for i, inst in enumerate(self.instances):
            z_des = self.refs_builder.swing_targets(times, self.schedule,
                                                    bags[i])
            ctx = make_stage_context(self.schedule, times, z_des)
            ctxs.append(ctx)
            inst.prepare(shifted, ctx, refs, bags[i],
                         shared_lin=(list(kins), list(idds)))
        prep_time = time.perf_counter() - t_prep0

        t_fb0 = time.perf_counter()
        qps = [inst.build_feedback_qp(x_meas) for inst in self.instances]
        if self.parallel and self.M > 1:
            sols = qpsolver.solve_batch(qps, max_iters=self.config.qp_max_iters,
                                        tol=self.config.qp_tol)
        else:
            sols = [qpsolver.solve(qp, max_iters=self.config.qp_max_iters,
                                   tol=self.config.qp_tol) for qp in qps]
        solutions = [inst.accept(sol, t_meas)
                     for inst, sol in zip(self.instances, sols)]
        for s in solutions:
            s.prep_time = prep_time

        valid = [i for i, s in enumerate(solutions) if s.valid]
        degraded = not valid
        if degraded:
            if self.last_result is not None:
                winner = self.last_result.winner
                chosen = self.last_result.chosen
            else:  # first tick cannot fall back: hold the shifted guess
                winner = MpcSolution(
                    guess=shifted, qp_objective=np.nan, nl_cost=np.nan,
                    ranking_cost=np.inf, status="diverged", iterations=0,
                    t_start=t_meas)
                chosen = 0
        else:
            chosen = min(valid, key=lambda i: (solutions[i].ranking_cost, i))
            winner = solutions[chosen]
            self.guess = winner.guess.copy()
            for inst in self.instances:
                inst.guess = winner.guess.copy()
            self.incumbent = {key: a.tile_id
                              for key, a in bags[chosen].items()
                              if a.constrained}
        fb_time = time.perf_counter() - t_fb0
        for s in solutions:
            s.fb_time = fb_time
        winner.prep_time = prep_time
        winner.fb_time = fb_time
        result = LayeredTickResult(
            solutions=solutions, bags=bags, chosen=chosen, winner=winner,
            degraded=degraded, prep_time=prep_time, fb_time=fb_time)
        self.last_result = result
        return result
