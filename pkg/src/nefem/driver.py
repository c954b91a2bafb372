"""Training drivers: the plain loop (train every enrichment each epoch) and
the adaptive loop (estimator-marked enrichment, periodically re-selected
trained subset), with history tracking and run checkpoints.

Each epoch: refresh caches, assemble, solve the Galerkin system without
gradient tracking, evaluate the Ritz loss, push the shortcut gradient into
Adam.  After the loop one final assemble+solve produces the reported
solution.  Runs are deterministic for a fixed config and seed.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .assembly import Assembler, apply_dirichlet, ritz_loss
from .estimator import doerfler_mark, estimate, percentage_mark
from .linsolve import SolverConfig, scaled_condition_number, solve_spd
from .mesh import build_structured_mesh, classify_interface_elements
from .network import (SPATIAL, SPATIAL_DISTANCE, AdamState, CheckpointError,
                      MlpEnrichment, adam_step, init_network)
from .problems import (error_norms, example1, example2, example3,
                       fem_reference, truth_at_quadrature)
from .space import build_space

HISTORY_SCHEMA = "nefem-history-v1"
RUN_SCHEMA = 1
HISTORY_COLUMNS = ("epoch", "loss", "e_l2", "e_h1", "eta", "effectivity",
                   "cond_scaled", "active_nodes", "wall_ms")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str = "example1"
    nx: int = 32
    dims: tuple = (2, 20, 20, 1)
    scales: tuple = (150, 2)
    learning_rate: float = 1e-3
    epochs: int = 200
    alpha1: float = 0.6
    alpha2: float = 0.6
    h1_epochs: int = 50
    h2_epochs: int = 50
    seed: int = 0
    quadrature_degree: int = 20
    solver_method: str = "auto"
    solver_tolerance: float = 1e-10
    enrichment: str = "all-interior"
    cond_every: int = 10
    edge_order: int = 25
    reference_nx: int = 512
    track_errors: bool = True
    timing: bool = True
    eps: float = 0.02
    oscillation: float = 1.5
    literal_distance: bool = False

    def validate(self):
        if self.problem not in ("example1", "example2", "example3"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.nx < 1:
            raise ConfigError("nx must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.enrichment not in ("all-interior", "interface-cut",
                                   "estimator-marked", "none"):
            raise ConfigError(f"unknown enrichment policy {self.enrichment!r}")
        if self.enrichment == "estimator-marked":
            if not (0 < self.alpha1 <= 1 and 0 < self.alpha2 < 1):
                raise ConfigError("marking fractions must lie in (0, 1)")
            if self.h1_epochs < 1 or self.h2_epochs < 1:
                raise ConfigError("adaptive epochs must be >= 1")
        return self

    def solver(self):
        return SolverConfig(method=self.solver_method,
                            tolerance=self.solver_tolerance)


def default_config(problem):
    """Per-experiment defaults (mesh, architecture, scales, schedule)."""
    if problem == "example1":
        return RunConfig(problem="example1", nx=32, dims=(2, 20, 20, 1),
                         scales=(150, 2), epochs=200,
                         enrichment="all-interior", reference_nx=512)
    if problem == "example2":
        return RunConfig(problem="example2", nx=32, dims=(2, 20, 20, 1),
                         scales=(150, 2), epochs=200, alpha1=0.6, alpha2=0.6,
                         h1_epochs=50, h2_epochs=50,
                         enrichment="estimator-marked")
    if problem == "example3":
        return RunConfig(problem="example3", nx=32, dims=(3, 20, 20, 1),
                         scales=(10, 2), epochs=200,
                         enrichment="interface-cut", cond_every=0)
    raise ConfigError(f"unknown problem {problem!r}")


def make_problem(config):
    if config.problem == "example1":
        return example1(eps=config.eps, P=config.oscillation)
    if config.problem == "example2":
        return example2()
    return example3(literal_distance=config.literal_distance)


def mesh_for(config):
    bounds = (-1.0, 1.0, -1.0, 1.0) if config.problem == "example3" \
        else (0.0, 1.0, 0.0, 1.0)
    return build_structured_mesh(config.nx, config.nx, bounds)


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)

    def append(self, **kw):
        if self.rows and kw["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("history epochs must be strictly increasing")
        self.rows.append({c: kw.get(c) for c in HISTORY_COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, stream, timing=True):
        stream.write(f"# schema={HISTORY_SCHEMA}\n")
        stream.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in self.rows:
            cells = []
            for c in HISTORY_COLUMNS:
                v = r[c]
                if c == "wall_ms" and not timing:
                    v = 0
                cells.append("" if v is None else repr(v))
            stream.write(",".join(cells) + "\n")

    @classmethod
    def from_rows(cls, rows):
        h = cls()
        for r in rows:
            h.rows.append({c: r.get(c) for c in HISTORY_COLUMNS})
        return h


@dataclass
class RunResult:
    config: RunConfig
    history: TrainingHistory
    space: object
    assembler: object
    system: object
    c_free: np.ndarray
    u_full: np.ndarray
    errors: tuple            # (e_l2, e_h1, e_e) or None
    enriched_nodes: np.ndarray
    diagnostics: dict


def _enriched_nodes_for(config, mesh, problem):
    if config.enrichment == "none":
        return np.array([], dtype=np.int64)
    if config.enrichment == "all-interior":
        bnd = set(mesh.boundary_nodes.tolist())
        return np.array([i for i in range(mesh.num_nodes) if i not in bnd],
                        dtype=np.int64)
    if config.enrichment == "interface-cut":
        _, cut_nodes, _ = classify_interface_elements(mesh, problem.interface)
        return np.asarray(cut_nodes, dtype=np.int64)
    raise ConfigError("estimator-marked enrichment is chosen by the "
                      "adaptive driver")


def _init_networks(config, mesh, nodes):
    mode = SPATIAL_DISTANCE if config.dims[0] == 3 else SPATIAL
    return [init_network(config.dims, config.scales, mode, mesh.nodes[n],
                         np.random.SeedSequence((config.seed, int(n))))
            for n in nodes]


def _resolve_truth(config, problem, assembler, truth):
    """Quadrature-point truth values for error tracking, or None."""
    if not config.track_errors:
        return None
    if truth is None:
        if problem.exact is not None:
            truth = problem
        elif config.reference_nx:
            truth = fem_reference(problem, config.reference_nx,
                                  degree=config.quadrature_degree,
                                  config=config.solver())
        else:
            return None
    return truth_at_quadrature(truth, assembler.equad)


def _marked_interior_vertices(mesh, elements):
    bnd = set(mesh.boundary_nodes.tolist())
    nodes = {int(v) for e in elements for v in mesh.triangles[e]}
    return np.array(sorted(nodes - bnd), dtype=np.int64)


class _Loop:
    """Shared epoch machinery for both drivers."""

    def __init__(self, config, problem, mesh, nodes, truth):
        self.config = config
        self.problem = problem
        self.mesh = mesh
        self.nets = _init_networks(config, mesh, nodes)
        distance_fn = problem.distance if (self.nets and
                                           self.nets[0].input_mode ==
                                           SPATIAL_DISTANCE) else None
        self.space = build_space(mesh, nodes, self.nets,
                                 distance_fn=distance_fn)
        self.asm = Assembler(self.space, problem,
                             degree=config.quadrature_degree)
        self.truth = _resolve_truth(config, problem, self.asm, truth)
        M = len(self.nets)
        npar = self.nets[0].num_params if M else 0
        self.params = (np.vstack([n.params for n in self.nets])
                       if M else np.zeros((0, 0)))
        self.adam = AdamState.for_params(M * npar, config.learning_rate)
        self.frozen = np.zeros(M, dtype=bool)
        self.history = TrainingHistory()
        self.solver = config.solver()

    def solve(self):
        system = self.asm.assemble()
        apply_dirichlet(system, self.problem.dirichlet, self.mesh)
        c = solve_spd(system.A_red, system.F_red, self.solver)
        return system, c

    def record(self, epoch, system, c, wall_ms, eta=None, effectivity=None):
        cfg = self.config
        errors = None
        if self.truth is not None:
            errors = error_norms(self.asm, system.full_coefficients(c),
                                 self.truth)
        cond = None
        if cfg.cond_every and (epoch % cfg.cond_every == 0
                               or epoch == cfg.epochs):
            cond = scaled_condition_number(system.A_red)
        self.history.append(
            epoch=epoch, loss=ritz_loss(system, c),
            e_l2=None if errors is None else errors[0],
            e_h1=None if errors is None else errors[1],
            eta=eta, effectivity=effectivity,
            cond_scaled=cond,
            active_nodes=int((~self.frozen).sum()),
            wall_ms=wall_ms)
        return errors

    def update(self, system, c):
        grads = self.asm.loss_theta_gradient(system, c,
                                             rtol=max(1e-6,
                                                      100 * self.solver.tolerance))
        if not len(self.nets):
            return
        g = np.asarray(grads)
        mask = np.repeat(self.frozen, self.params.shape[1])
        adam_step(self.adam, self.params.ravel(), g.ravel(), frozen_mask=mask)
        for m, net in enumerate(self.nets):
            if not self.frozen[m]:
                net.set_params(self.params[m])

    def effectivity_pair(self, system, c):
        """(eta, eta / e_H1) on the current solution."""
        self.space.refresh_cache()
        u = system.full_coefficients(c)
        fld = estimate(self.asm, u, edge_order=self.config.edge_order)
        eff = None
        if self.truth is not None:
            _, e_h1, _ = error_norms(self.asm, u, self.truth)
            if e_h1 > 0:
                eff = fld.eta / e_h1
        return fld, eff


def run_nefem(config, problem=None, truth=None):
    """Plain training: every enrichment function is updated each epoch."""
    config.validate()
    if config.enrichment == "estimator-marked":
        raise ConfigError("use run_adaptive_nefem for estimator-marked runs")
    problem = problem or make_problem(config)
    mesh = mesh_for(config)
    nodes = _enriched_nodes_for(config, mesh, problem)
    loop = _Loop(config, problem, mesh, nodes, truth)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        system, c = loop.solve()
        loop.update(system, c)
        wall = (time.perf_counter() - t0) * 1e3
        loop.record(epoch, system, c, wall)
    t0 = time.perf_counter()
    system, c = loop.solve()
    wall = (time.perf_counter() - t0) * 1e3
    errors = loop.record(config.epochs, system, c, wall)
    loop.space.refresh_cache()
    return RunResult(config=config, history=loop.history, space=loop.space,
                     assembler=loop.asm, system=system, c_free=c,
                     u_full=system.full_coefficients(c), errors=errors,
                     enriched_nodes=nodes,
                     diagnostics=dict(loop.asm.equad.diagnostics))


def run_adaptive_nefem(config, problem=None, truth=None):
    """Adaptive training: a plain P1 solve and the residual estimator choose
    the enriched nodes (percentage marking); during training the trained
    subset is re-selected every h2 epochs after h1 by Doerfler marking, and
    the remaining networks are frozen."""
    config.validate()
    if config.enrichment != "estimator-marked":
        raise ConfigError("adaptive driver requires estimator-marked "
                          "enrichment")
    problem = problem or make_problem(config)
    mesh = mesh_for(config)

    # initial P1 solve and marking
    p1 = _Loop(replace(config, enrichment="none"), problem, mesh,
               np.array([], dtype=np.int64), truth)
    system0, c0 = p1.solve()
    field0 = estimate(p1.asm, system0.full_coefficients(c0),
                      edge_order=config.edge_order)
    marked = percentage_mark(field0, config.alpha1)
    nodes = _marked_interior_vertices(mesh, marked)

    loop = _Loop(config, problem, mesh, nodes, truth)
    loop.truth = p1.truth  # reuse (same mesh/quadrature)
    enriched_set = set(int(n) for n in nodes)
    diagnostics = {"initial_eta": field0.eta, "marked_elements": len(marked),
                   "doerfler_shortfall": 0}

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        system, c = loop.solve()
        eta = effectivity = None
        if epoch == 0 or (epoch >= config.h1_epochs
                          and (epoch - config.h1_epochs) % config.h2_epochs == 0):
            fld, effectivity = loop.effectivity_pair(system, c)
            eta = fld.eta
            if epoch > 0:
                selected, reached = doerfler_mark(fld, config.alpha2,
                                                  candidates=marked)
                if not reached:
                    diagnostics["doerfler_shortfall"] += 1
                active = {int(v) for e in selected
                          for v in mesh.triangles[e]} & enriched_set
                loop.frozen = np.array([int(n) not in active
                                        for n in nodes], dtype=bool)
        loop.update(system, c)
        wall = (time.perf_counter() - t0) * 1e3
        loop.record(epoch, system, c, wall, eta=eta, effectivity=effectivity)

    t0 = time.perf_counter()
    system, c = loop.solve()
    fld, effectivity = loop.effectivity_pair(system, c)
    wall = (time.perf_counter() - t0) * 1e3
    errors = loop.record(config.epochs, system, c, wall, eta=fld.eta,
                         effectivity=effectivity)
    return RunResult(config=config, history=loop.history, space=loop.space,
                     assembler=loop.asm, system=system, c_free=c,
                     u_full=system.full_coefficients(c), errors=errors,
                     enriched_nodes=nodes, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# run persistence
# ---------------------------------------------------------------------------

def save_run(result, path):
    """Run checkpoint: config, history, enriched nodes, network parameters.
    Deterministic serialization; reload + re-solve reproduces the errors."""
    payload = {
        "schema": RUN_SCHEMA,
        "config": asdict(result.config),
        "enriched_nodes": [int(n) for n in result.enriched_nodes],
        "history": result.history.rows,
        "networks": [n.to_record() for n in result.space.enrichments],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_run(path):
    """(config, history, enriched_nodes, networks) from a run checkpoint."""
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable run file {path}: {exc}") from exc
    if payload.get("schema") != RUN_SCHEMA:
        raise CheckpointError(f"run schema {payload.get('schema')} "
                              "not supported")
    try:
        cfg_dict = dict(payload["config"])
        cfg_dict["dims"] = tuple(cfg_dict["dims"])
        cfg_dict["scales"] = tuple(cfg_dict["scales"])
        config = RunConfig(**cfg_dict)
        nodes = np.asarray(payload["enriched_nodes"], dtype=np.int64)
        history = TrainingHistory.from_rows(payload["history"])
        networks = [MlpEnrichment.from_record(r) for r in payload["networks"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed run file {path}: {exc}") from exc
    return config, history, nodes, networks


def rebuild_solution(config, nodes, networks, problem=None):
    """Re-assemble and re-solve with stored networks; returns a RunResult
    without training history."""
    problem = problem or make_problem(config)
    mesh = mesh_for(config)
    distance_fn = problem.distance if (networks and networks[0].input_mode
                                       == SPATIAL_DISTANCE) else None
    space = build_space(mesh, nodes, networks, distance_fn=distance_fn)
    asm = Assembler(space, problem, degree=config.quadrature_degree)
    system = asm.assemble()
    apply_dirichlet(system, problem.dirichlet, mesh)
    c = solve_spd(system.A_red, system.F_red, config.solver())
    truth = _resolve_truth(config, problem, asm, None)
    errors = (error_norms(asm, system.full_coefficients(c), truth)
              if truth is not None else None)
    return RunResult(config=config, history=TrainingHistory(), space=space,
                     assembler=asm, system=system, c_free=c,
                     u_full=system.full_coefficients(c), errors=errors,
                     enriched_nodes=nodes,
                     diagnostics=dict(asm.equad.diagnostics))
