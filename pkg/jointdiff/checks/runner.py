# jointdiff/checks/runner.py
"""Self-check suite: numerical properties run in dependency order.

A check whose prerequisite failed is reported as skipped and counts as a
failure of the suite.
"""

import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from rich.console import Console
from rich.panel import Panel

from jointdiff.diffusion import categorical, gaussian
from jointdiff.diffusion.schedule import DiscreteSchedule, Schedules, cosine_discrete_schedule, linear_beta_schedule
from jointdiff.model.joint import encode_batch, joint_loss, make_batch, PatientRecord
from jointdiff.nn import autograd as ag
from jointdiff.nn.denoiser import DenoiserConfig, init_params
from jointdiff.tools.export import export_image, read_pgm

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4


@dataclass
class CheckDefinition:
    id: str
    title: str
    run: Callable[[], Tuple[bool, str]]
    depends_on: List[str] = field(default_factory=list)


@dataclass
class CheckResult:
    id: str
    title: str
    status: str  # passed | failed | skipped
    detail: str
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "passed"


# -- individual checks ---------------------------------------------------------

def check_schedule_algebra() -> Tuple[bool, str]:
    T = 1000
    sched = linear_beta_schedule(T)
    recurrence = np.max(np.abs(sched.alpha_bars[1:] - sched.alpha_bars[:-1] * (1.0 - sched.betas)))
    disc = cosine_discrete_schedule(T, 2)
    row_q = np.max(np.abs(disc.Q.sum(axis=-1) - 1.0))
    row_qbar = np.max(np.abs(disc.Q_bar.sum(axis=-1) - 1.0))
    keep = disc.keep_bars[:, None, None]
    closed_form = np.max(np.abs(disc.Q_bar - (keep * np.eye(2) + (1.0 - keep) / 2.0)))
    to_uniform = np.max(np.abs(disc.Q_bar[T] - 0.5))
    ok = (recurrence <= 1e-12 and row_q <= 1e-10 and row_qbar <= 1e-10 and closed_form <= 1e-10
          and to_uniform <= 0.05)
    return ok, (f"alpha_bar recurrence {recurrence:.1e}, row sums Q {row_q:.1e} / Q_bar {row_qbar:.1e}, "
                f"closed-form Q_bar {closed_form:.1e}, |Q_bar_T - uniform| {to_uniform:.3f}")


def check_gaussian_marginal(n_draws: int = 100_000, n_se: float = 3.0, seed: int = 0) -> Tuple[bool, str]:
    T = 1000
    sched = linear_beta_schedule(T)
    rng = np.random.default_rng(seed)
    x0 = 1.0
    x = np.full(n_draws, x0)
    targets = sorted({1, T // 4, T // 2, T})
    worst = 0.0
    for t in range(1, T + 1):
        x = gaussian.q_step(x, t, rng.standard_normal(n_draws), sched)
        if t in targets:
            ab = sched.alpha_bars[t]
            mean, var = np.sqrt(ab) * x0, 1.0 - ab
            se_mean = np.sqrt(var / n_draws)
            se_var = var * np.sqrt(2.0 / (n_draws - 1))
            worst = max(worst, abs(x.mean() - mean) / se_mean, abs(x.var(ddof=1) - var) / se_var)
    return worst <= n_se, f"largest deviation {worst:.2f} SE over t in {targets} ({n_draws} draws)"


def check_d3pm_enumeration(seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_post, worst_jump = 0.0, 0.0
    for K in (2, 3):
        for T in range(1, 5):
            sched = DiscreteSchedule.from_betas(rng.uniform(0.05, 0.95, T), K)
            soft = rng.dirichlet(np.ones(K))
            for t in range(1, T + 1):
                for t_prev in range(t):
                    for c in range(K):
                        z_t = categorical.one_hot(c, K)
                        brute = np.stack([categorical.enumerate_posterior(c, i, t, t_prev, sched) for i in range(K)])
                        for i in range(K):
                            got = categorical.d3pm_posterior(z_t, categorical.one_hot(i, K), t, t_prev, sched)
                            worst_post = max(worst_post, np.max(np.abs(got - brute[i])))
                        got = categorical.d3pm_posterior(z_t, soft, t, t_prev, sched)
                        worst_post = max(worst_post, np.max(np.abs(got - soft @ brute)))
                        for t_mid in range(t_prev + 1, t):
                            for i in range(K):
                                x0 = categorical.one_hot(i, K)
                                first = categorical.d3pm_posterior(z_t, x0, t, t_mid, sched)
                                second = np.stack([
                                    categorical.d3pm_posterior(categorical.one_hot(m, K), x0, t_mid, t_prev, sched)
                                    for m in range(K)
                                ])
                                direct = categorical.d3pm_posterior(z_t, x0, t, t_prev, sched)
                                worst_jump = max(worst_jump, np.max(np.abs(first @ second - direct)))
    ok = worst_post <= 1e-9 and worst_jump <= 1e-9
    return ok, f"posterior vs enumeration {worst_post:.1e}, jump composition {worst_jump:.1e}"


def _primitive_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[..., ag.Node], List[np.ndarray]]]:
    x44 = rng.standard_normal((4, 4))
    img = rng.standard_normal((2, 4, 4, 4))
    return {
        "add": (lambda a, b: ag.reduce_sum(ag.square(ag.add(a, b))), [x44, rng.standard_normal((4, 4))]),
        "multiply": (lambda a, b: ag.reduce_sum(ag.multiply(a, b)), [x44, rng.standard_normal((4, 4))]),
        "matmul": (lambda w, x: ag.reduce_mean(ag.silu(ag.matmul(w, x))), [x44, rng.standard_normal((4, 3))]),
        "conv2d": (lambda x, w, b: ag.reduce_mean(ag.square(ag.conv2d(x, w, b))),
                   [img, rng.standard_normal((3, 4, 3, 3)), rng.standard_normal(3)]),
        "group_norm": (lambda x, g, b: ag.reduce_sum(ag.multiply(ag.group_norm(x, g, b, 2), ag.constant(img[::-1].copy()))),
                       [img, rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)]),
        "silu": (lambda x: ag.reduce_sum(ag.silu(x)), [x44]),
        "softmax": (lambda x: ag.reduce_sum(ag.multiply(ag.softmax(x), ag.constant(np.arange(16.0).reshape(4, 4)))), [x44]),
        "log_softmax": (lambda x: ag.reduce_sum(ag.multiply(ag.log_softmax(x), ag.constant(np.eye(4)))), [x44]),
        "mean": (lambda x: ag.reduce_mean(ag.square(ag.reduce_mean(x, axis=(2, 3)))), [img]),
        "reshape": (lambda x: ag.reduce_sum(ag.square(ag.reshape(x, (8, 2)))), [x44]),
        "broadcast": (lambda x: ag.reduce_sum(ag.square(ag.broadcast(x, (4, 4)))), [rng.standard_normal((1, 4))]),
        "concat": (lambda a, b: ag.reduce_sum(ag.square(ag.concat_channels(a, b))), [img, img[:, :2].copy()]),
        "pool_upsample": (lambda x: ag.reduce_sum(ag.square(ag.upsample2(ag.avg_pool2(x)))), [img]),
    }


def check_primitive_gradients(seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (fn, values) in _primitive_cases(rng).items():
        leaves = [ag.leaf(np.array(v, dtype=np.float64)) for v in values]
        errors[name] = ag.grad_check(lambda: fn(*leaves), leaves, tolerance=GRAD_TOLERANCE)
    worst = max(errors, key=errors.get)
    return errors[worst] < GRAD_TOLERANCE, f"worst primitive {worst}: {errors[worst]:.1e}"


def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(side=8, base_channels=4, depth=1, temb_dim=8, norm_groups=2, precision="float64")


def check_denoiser_gradient(seed: int = 0, max_entries: int = 4) -> Tuple[bool, str]:
    config = tiny_denoiser_config()
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, zero_init_heads=False)
    schedules = Schedules(linear_beta_schedule(20), cosine_discrete_schedule(20, config.n_categories))
    records = [
        PatientRecord(np.tanh(rng.standard_normal((config.side, config.side))), rng.uniform(20, 90), s)
        for s in (0, 1)
    ]
    batch = make_batch(encode_batch(records), rng, rng, schedules)
    error = ag.grad_check(lambda: joint_loss(batch, params, config).total, params.values(),
                          tolerance=GRAD_TOLERANCE, max_entries=max_entries, rng=rng)
    return error < GRAD_TOLERANCE, f"max relative error {error:.1e} over {len(params)} tensors"


def check_pgm_roundtrip(seed: int = 0) -> Tuple[bool, str]:
    grid = np.random.default_rng(seed).uniform(-1.0, 1.0, (16, 16))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "roundtrip.pgm"
        export_image(grid, path)
        back = read_pgm(path)
    err = float(np.max(np.abs(back - grid)))
    return err <= 1.0 / 255.0 + 1e-12, f"max reimport error {err:.4f} (bound {1 / 255:.4f})"


DEFAULT_CHECKS = [
    CheckDefinition("schedule", "Schedule algebra", check_schedule_algebra),
    CheckDefinition("gaussian", "Gaussian marginal consistency", check_gaussian_marginal, ["schedule"]),
    CheckDefinition("d3pm", "Categorical posterior vs path enumeration", check_d3pm_enumeration, ["schedule"]),
    CheckDefinition("primitives", "Autograd primitive gradients", check_primitive_gradients),
    CheckDefinition("denoiser", "Denoiser loss gradient", check_denoiser_gradient, ["primitives"]),
    CheckDefinition("pgm", "PGM export round trip", check_pgm_roundtrip),
]


class CheckGraph:
    """Checks with their prerequisites."""

    def __init__(self, checks: Sequence[CheckDefinition] = DEFAULT_CHECKS):
        self.checks: Dict[str, CheckDefinition] = {}
        self.graph = nx.DiGraph()
        for check in checks:
            self.add(check)

    def add(self, check: CheckDefinition) -> None:
        self.checks[check.id] = check
        self.graph.add_node(check.id)
        for dep in check.depends_on:
            self.graph.add_edge(dep, check.id)

    def select(self, ids: Optional[Sequence[str]]) -> List[str]:
        """Requested checks plus everything they depend on, in execution order."""
        order = self.execution_order()
        if not ids:
            return order
        unknown = [i for i in ids if i not in self.checks]
        if unknown:
            raise ValueError(f"Unknown checks: {unknown}; available: {order}")
        wanted = set(ids)
        for i in ids:
            wanted |= nx.ancestors(self.graph, i)
        return [i for i in order if i in wanted]

    def execution_order(self) -> List[str]:
        missing = [n for n in self.graph.nodes if n not in self.checks]
        if missing:
            raise ValueError(f"Checks depend on undefined checks: {missing}")
        try:
            return list(nx.topological_sort(self.graph))
        except nx.NetworkXUnfeasible:
            raise ValueError("Check graph contains cycles and cannot be sorted")


def run_checks(ids: Optional[Sequence[str]] = None, console: Optional[Console] = None,
               graph: Optional[CheckGraph] = None) -> List[CheckResult]:
    graph = graph or CheckGraph()
    order = graph.select(ids)
    results: Dict[str, CheckResult] = {}

    for check_id in order:
        check = graph.checks[check_id]
        blocked = [d for d in check.depends_on if d in results and not results[d].passed]
        if blocked:
            result = CheckResult(check.id, check.title, "skipped", f"prerequisite failed: {', '.join(blocked)}")
        else:
            start = time.perf_counter()
            try:
                ok, detail = check.run()
                status = "passed" if ok else "failed"
            except Exception as e:
                logger.error(f"Check {check.id} raised: {e}", exc_info=True)
                status, detail = "failed", f"{type(e).__name__}: {e}"
            result = CheckResult(check.id, check.title, status, detail, time.perf_counter() - start)
        results[check_id] = result
        logger.debug(f"check {check_id}: {result.status} ({result.detail})")
        if console is not None:
            _print_result(console, result)

    return [results[i] for i in order]


def _print_result(console: Console, result: CheckResult) -> None:
    style = {"passed": "green", "failed": "red", "skipped": "yellow"}[result.status]
    icon = {"passed": "✅", "failed": "❌", "skipped": "⏭️"}[result.status]
    console.print(Panel(
        f"{result.detail}\n[dim]{result.seconds:.2f}s[/]",
        title=f"[bold {style}]{icon} {result.title}[/]",
        border_style=style,
        expand=False,
    ))
