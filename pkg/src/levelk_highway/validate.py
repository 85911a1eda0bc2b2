"""Driver-by-driver comparison of trained policies against recorded behaviour.

For every driver extracted from trajectory data, each sufficiently visited
state's empirical action pdf is tested against the trained (game-
theoretical) policies' pdfs with the discontinuous K-S test; a state counts
as successfully modeled when at least one level of the hierarchy is not
rejected.  A uniform-pdf benchmark runs over the identical state sets, and
per-driver results aggregate into mean success rates, retained/rejected
mean absolute errors, and the data behind the comparison color maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dqn
from .env import N_ACTIONS, BinnedObservation, EnvParams, level0_policy
from .ingest import EmpiricalPolicy, floor_pdf
from .kstest import KSOutcome, compare_pdfs
from .levelk import PolicyRef


class UnpairedDriverError(ValueError):
    """Benchmark reports do not cover the same drivers."""


@dataclass
class GTStatePolicy:
    """Per-state action pdfs of one policy, floored like the empirical ones."""

    label: str
    pdfs: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    def pdf(self, state_index: int) -> np.ndarray | None:
        return self.pdfs.get(state_index)


def derive_gt_state_policy(
    ref: PolicyRef,
    states: list[int],
    probes_by_state: dict[int, list[np.ndarray]] | None = None,
    params: EnvParams | None = None,
) -> GTStatePolicy:
    """Project a policy onto per-state action pdfs for the requested states.

    Quantized-input policies evaluate each state directly.  A continuous-
    input network has no canonical representative per quantized state, so
    its pdf is the mean Boltzmann pdf over the probe observations that fell
    into the state (typically the data's own continuous encodings); states
    without probes are skipped and reported.
    """
    params = params or EnvParams()
    out = GTStatePolicy(label=f"level{ref.level}")
    if ref.kind == "rule":
        for s in states:
            one_hot = np.zeros(N_ACTIONS)
            one_hot[int(level0_policy(BinnedObservation.from_index(s)))] = 1.0
            out.pdfs[s] = floor_pdf(one_hot)
        return out
    net = ref.policy.net
    temperature = ref.policy.temperature
    if net.encoding == "binned":
        for s in states:
            x = dqn.encode_binned(BinnedObservation.from_index(s))
            out.pdfs[s] = floor_pdf(dqn.boltzmann_probs(net.forward(x), temperature))
        return out
    for s in states:
        probes = (probes_by_state or {}).get(s)
        if not probes:
            out.skipped.append(s)
            continue
        q = net.forward(np.stack(probes))
        shifted = (q - q.max(axis=1, keepdims=True)) / temperature
        e = np.exp(shifted)
        pdfs = e / e.sum(axis=1, keepdims=True)
        out.pdfs[s] = floor_pdf(pdfs.mean(axis=0))
    return out


def uniform_benchmark(states: list[int]) -> GTStatePolicy:
    """The benchmark policy: uniform over the 7 actions in every state."""
    pdf = np.full(N_ACTIONS, 1.0 / N_ACTIONS)
    return GTStatePolicy(label="uniform", pdfs={s: pdf.copy() for s in states})


@dataclass
class StateComparison:
    state_index: int
    visits: int
    outcomes: dict[str, KSOutcome]  # per policy label
    best_label: str                 # label with the highest two-sided level
    success: bool

    @property
    def best(self) -> KSOutcome:
        return self.outcomes[self.best_label]


@dataclass
class DriverReport:
    driver_id: int
    n_comparisons: int
    n_success: int
    comparisons: list[StateComparison] = field(default_factory=list)

    @property
    def success_pct(self) -> float | None:
        if self.n_comparisons == 0:
            return None
        return 100.0 * self.n_success / self.n_comparisons


def compare_driver(
    emp: EmpiricalPolicy,
    family: list[GTStatePolicy],
    n_limit: int,
    alpha: float = 0.05,
) -> DriverReport:
    """Test one driver's per-state pdfs against a family of model policies.

    Only states visited at least ``n_limit`` times enter; a state succeeds
    when any family member is retained at ``alpha``.  The family member
    with the highest critical level represents the state in the MAE
    bookkeeping.  States no family member covers are left out entirely.
    """
    if n_limit < 1:
        raise ValueError("n_limit must be >= 1")
    report = DriverReport(driver_id=emp.driver_id, n_comparisons=0, n_success=0)
    for state in sorted(emp.states):
        visits, emp_pdf = emp.states[state]
        if visits < n_limit:
            continue
        outcomes: dict[str, KSOutcome] = {}
        for member in family:
            pdf = member.pdf(state)
            if pdf is None:
                continue
            outcomes[member.label] = compare_pdfs(pdf, emp_pdf, visits, alpha)
        if not outcomes:
            continue
        best_label = max(outcomes, key=lambda lbl: outcomes[lbl].p_two_sided)
        success = any(not o.rejected for o in outcomes.values())
        report.comparisons.append(
            StateComparison(
                state_index=state,
                visits=visits,
                outcomes=outcomes,
                best_label=best_label,
                success=success,
            )
        )
        report.n_comparisons += 1
        report.n_success += int(success)
    return report


@dataclass
class ValidationSummary:
    n_drivers: int
    mean_gt_pct: float | None
    mean_ud_pct: float | None
    mean_diff_pct: float | None
    amae: float | None            # mean absolute error over retained comparisons
    rmae: float | None            # over rejected comparisons
    amae_sum: float | None        # same, in the unnormalized sum convention
    rmae_sum: float | None
    per_level_pct: dict[str, float]
    color_map: np.ndarray         # (10, 10) counts: [ud_bucket, gt_bucket]


def _bucket(pct: float) -> int:
    return min(int(pct // 10), 9)


def aggregate(
    reports: list[DriverReport], ud_reports: list[DriverReport]
) -> ValidationSummary:
    """Merge per-driver results with their uniform-benchmark counterparts.

    Drivers without any qualifying comparison are excluded from every mean.
    MAEs pool over comparisons (not drivers); the representative outcome of
    each state feeds the retained/rejected split.
    """
    ud_by_id = {r.driver_id: r for r in ud_reports}
    gt_pcts: list[float] = []
    ud_pcts: list[float] = []
    diffs: list[float] = []
    retained_maes: list[float] = []
    rejected_maes: list[float] = []
    level_success: dict[str, list[int]] = {}
    color = np.zeros((10, 10), dtype=int)

    for rep in reports:
        if rep.driver_id not in ud_by_id:
            raise UnpairedDriverError(f"no benchmark report for driver {rep.driver_id}")
        if rep.success_pct is None:
            continue
        ud = ud_by_id[rep.driver_id]
        gt_pcts.append(rep.success_pct)
        if ud.success_pct is not None:
            ud_pcts.append(ud.success_pct)
            diffs.append(rep.success_pct - ud.success_pct)
            color[_bucket(ud.success_pct), _bucket(rep.success_pct)] += 1
        for comp in rep.comparisons:
            out = comp.best
            (retained_maes if not out.rejected else rejected_maes).append(out.mae)
            for label, o in comp.outcomes.items():
                level_success.setdefault(label, []).append(int(not o.rejected))

    def mean_or_none(values):
        return float(np.mean(values)) if values else None

    amae = mean_or_none(retained_maes)
    rmae = mean_or_none(rejected_maes)
    return ValidationSummary(
        n_drivers=len(gt_pcts),
        mean_gt_pct=mean_or_none(gt_pcts),
        mean_ud_pct=mean_or_none(ud_pcts),
        mean_diff_pct=mean_or_none(diffs),
        amae=amae,
        rmae=rmae,
        amae_sum=None if amae is None else amae * N_ACTIONS,
        rmae_sum=None if rmae is None else rmae * N_ACTIONS,
        per_level_pct={
            label: 100.0 * float(np.mean(flags)) for label, flags in sorted(level_success.items())
        },
        color_map=color,
    )
