"""Metrics and the four-method simulation benchmark.

Methods compared on each simulated study:

``proposed``
    Pseudo-EM fit; prediction from markers only.
``dknown``
    Time-varying logistic model fit on the latent labels; initial
    distribution and intensities from the latent-label panel.
``hmm``
    Surrogate-only HMM, decoded on the test set using its labels.
``obs``
    Time-varying logistic model fit on the surrogate labels.
"""
from __future__ import annotations

import concurrent.futures
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import scipy.integrate
import scipy.stats

from .core_model import Dataset, DiscriminativeParams, InitialDistribution, ModelParams, TransitionIntensityMatrix
from .discriminative import (
    NO_PENALTY,
    PenaltyConfig,
    WeightedClassificationProblem,
    adaptive_weights_from,
    cross_validate_lambda,
    fit_weighted_multinomial,
    lambda_grid,
    one_hot,
)
from .em import FitConfig, Layout, fit, initialize, mstep_transition
from .errors import ConfigError, GdhmmError
from .hmm_baseline import fit_hmm, hmm_decode_dataset
from .predict import adaptive_viterbi_dataset, posterior_predict_dataset
from .simulate import NUM_SIGNAL, SimulationConfig, canonical_mask, make_study
from .splines import build_basis, evaluate_basis

METHODS = ("proposed", "dknown", "hmm", "obs")
HMM_BLOCKS = ("tran", "emis", "init")
EVAL_MODES = ("all_visits", "last_visit")


# ---------------------------------------------------------------- metrics


def accuracy(pred, truth) -> float:
    """Percentage of matching labels."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise ConfigError("prediction and truth must be nonempty and of equal shape")
    return 100.0 * float(np.mean(pred == truth))


def one_vs_rest_auc(scores, truth, num_classes: int | None = None) -> np.ndarray:
    """Mann-Whitney AUC of each class against the rest.

    Tied scores count one half.  A class without positives or negatives
    gets ``nan``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.asarray(truth)
    S = scores.shape[1] if num_classes is None else num_classes
    out = np.full(S, np.nan)
    for k in range(S):
        pos = truth == k
        n1, n0 = int(pos.sum()), int((~pos).sum())
        if n1 == 0 or n0 == 0:
            continue
        r = scipy.stats.rankdata(scores[:, k])
        out[k] = (r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    return out


class SelectionMetrics(NamedTuple):
    C: int
    IC: int
    MCC: float


def selection_metrics(beta_hat, true_support) -> SelectionMetrics:
    """Correct and incorrect selections and the Matthews coefficient.

    Marker ``u`` is selected when its coefficient group across classes has
    nonzero norm.  MCC is 0 whenever its denominator vanishes.
    """
    sel = np.linalg.norm(np.atleast_2d(beta_hat), axis=0) > 0
    sup = np.asarray(true_support, dtype=bool)
    if sup.shape != sel.shape:
        raise ConfigError("support indicator must have one entry per marker")
    tp = int(np.sum(sel & sup))
    fp = int(np.sum(sel & ~sup))
    fn = int(np.sum(~sel & sup))
    tn = int(np.sum(~sel & ~sup))
    den = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = (tp * tn - fp * fn) / den if den > 0 else 0.0
    return SelectionMetrics(tp, fp, float(mcc))


def integrated_squared_difference(a, b, grid) -> np.ndarray:
    """Trapezoid integral of ``(a - b) ** 2`` per column."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return scipy.integrate.trapezoid(d * d, np.asarray(grid, dtype=float), axis=0)


def misd(eta_hat, eta_ref, basis, t_max: float | None = None, num: int = 1000) -> np.ndarray:
    """Integrated squared difference of two intercept curves per class.

    Both coefficient sets live on ``basis``; the integral runs over
    ``num`` equally spaced points on ``[0, t_max]``.
    """
    t_max = basis.t_star if t_max is None else t_max
    grid = np.linspace(0.0, t_max, num)
    B = evaluate_basis(basis, grid)
    return integrated_squared_difference(B @ np.atleast_2d(eta_hat).T, B @ np.atleast_2d(eta_ref).T, grid)


def hmm_free_parameters(params, truth_mask) -> dict:
    """Free HMM parameters by block.

    ``tran`` holds the rates on ``truth_mask``; ``emis`` drops the first
    column of the emission matrix and ``init`` the first entry of ``pi``,
    since both are fixed by the row sums.
    """
    return {
        "tran": np.asarray(params.intensity.rho)[truth_mask],
        "emis": np.asarray(params.emission.e)[:, 1:].ravel(),
        "init": np.asarray(params.init.pi)[1:],
    }


def parameter_errors(est: ModelParams, truth: ModelParams, truth_mask=None) -> dict:
    """Estimate minus truth for each block.

    Blocks are ``tran``, ``emis``, ``init`` and, when both models carry
    logistic coefficients, ``beta`` plus ``beta_1 .. beta_p`` per marker.
    """
    mask = truth.intensity.structure_mask if truth_mask is None else truth_mask
    a, b = hmm_free_parameters(est, mask), hmm_free_parameters(truth, mask)
    out = {k: a[k] - b[k] for k in HMM_BLOCKS}
    if est.discrim is not None and truth.discrim is not None:
        d = est.discrim.beta - truth.discrim.beta
        out["beta"] = d.ravel()
        for u in range(d.shape[1]):
            out[f"beta_{u + 1}"] = d[:, u]
    return out


def bias_mse(errors) -> tuple[float, float]:
    """Average absolute bias and MSE over the elements of a block.

    ``errors`` is ``(replications, elements)``.  The bias of an element is
    its mean error across replications.
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    if e.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(np.abs(e.mean(axis=0)))), float(np.mean(e * e))


# ---------------------------------------------------------------- comparators


def fit_labels(data: Dataset, weights, cfg: FitConfig, rng: np.random.Generator, basis=None) -> DiscriminativeParams:
    """Time-varying multinomial logistic fit on per-visit class weights.

    With an active penalty kind the adaptive weights come from an
    unpenalized fit and lambda from cross-validation (or ``cfg.penalty.lam``
    when ``cfg.cv`` is off).
    """
    st = data.stacked()
    basis = build_basis(data.n, data.dims.t_star, cfg.spline_order) if basis is None else basis
    problem = WeightedClassificationProblem(st.times, st.markers, weights, basis)
    base = fit_weighted_multinomial(problem, NO_PENALTY).params
    if cfg.penalty.kind == "none":
        return base
    w = adaptive_weights_from(base.beta) if cfg.penalty.adaptive_weights is None else cfg.penalty.adaptive_weights
    lam = cfg.penalty.lam
    if cfg.cv:
        grid = lambda_grid(problem, w, cfg.lambda_grid_size, cfg.lambda_min_ratio)
        lam = cross_validate_lambda(problem, grid, cfg.cv_folds, rng, w, base).lam
    return fit_weighted_multinomial(problem, PenaltyConfig(cfg.penalty.kind, float(lam), w), base).params


def panel_hmm(data: Dataset, states, mask, rng, num_starts: int = 5):
    """Initial distribution and intensities from fully observed latent paths."""
    S = data.dims.num_states
    layout = Layout(data.stacked(), S)
    d = np.concatenate([np.asarray(s) for s in states])
    pi = np.bincount(d[layout.first_rows], minlength=S) / data.n
    rows = layout.index[layout.int_subject, layout.int_visit]
    prev = layout.index[layout.int_subject, layout.int_visit - 1]
    w = np.zeros((len(rows), S, S))
    w[np.arange(len(rows)), d[prev], d[rows]] = 1.0
    start = TransitionIntensityMatrix.from_rates(np.full(int(mask.sum()), 0.1), mask)
    ts = mstep_transition(w, layout.transitions, start, num_starts, rng)
    return InitialDistribution(pi), ts.intensity


# ---------------------------------------------------------------- benchmark


def default_fit_config(sim: SimulationConfig, **overrides) -> FitConfig:
    """Benchmark fit settings: the canonical transition structure and, for
    more than four markers, the group adaptive lasso tuned by 5-fold CV."""
    kw = dict(structure_mask=canonical_mask())
    if sim.num_markers > NUM_SIGNAL:
        kw.update(penalty=PenaltyConfig("group_adaptive_lasso"), cv=True)
    kw.update(overrides)
    return FitConfig(**kw)


@dataclass
class MethodResult:
    method: str
    status: str = "ok"
    error: str = ""
    acc_posterior: float = float("nan")
    acc_viterbi: float = float("nan")
    auc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    selection: SelectionMetrics | None = None
    noise_zero: bool | None = None
    errors: dict = field(default_factory=dict)
    misd: np.ndarray | None = None
    params: ModelParams | None = field(default=None, repr=False)
    seconds: float = 0.0


@dataclass
class ReplicationResult:
    rep: int
    seed: int
    methods: dict


def _test_targets(study, mode: str):
    truth = np.concatenate([np.asarray(s) for s in study.test_states])
    if mode == "all_visits":
        return truth, np.ones(len(truth), dtype=bool)
    keep = np.zeros(len(truth), dtype=bool)
    keep[np.cumsum([s.num_visits for s in study.test.subjects]) - 1] = True
    return truth, keep


def _score(res: MethodResult, probs, path, truth, keep):
    res.acc_posterior = accuracy(np.argmax(probs[keep], axis=1), truth[keep])
    if path is not None:
        res.acc_viterbi = accuracy(path[keep], truth[keep])
    res.auc = one_vs_rest_auc(probs[keep], truth[keep])


def run_replication(
    sim: SimulationConfig,
    fit_cfg: FitConfig,
    methods=METHODS,
    rep: int = 0,
    seed: int = 0,
    eval_mode: str = "all_visits",
) -> ReplicationResult:
    """Simulate one study and evaluate every requested method on it.

    Failures of one method are recorded in its result and do not affect
    the others.
    """
    if eval_mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {eval_mode!r}")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}")
    ss = np.random.SeedSequence(seed)
    sim_seq, fit_seq, aux_seq = ss.spawn(3)
    study = make_study(replace(sim, seed=int(sim_seq.generate_state(1)[0])), np.random.default_rng(sim_seq))
    cfg = replace(fit_cfg, seed=int(fit_seq.generate_state(1)[0]))
    aux = np.random.default_rng(aux_seq)
    truth, keep = _test_targets(study, eval_mode)
    train, test = study.train, study.test
    S = train.dims.num_states
    mask = cfg.mask_for(S)
    support = np.zeros(sim.num_markers, dtype=bool)
    support[:NUM_SIGNAL] = True
    out = {}
    hmm = None

    def run(name, body):
        res = MethodResult(name)
        t0 = time.perf_counter()
        try:
            body(res)
        except (GdhmmError, np.linalg.LinAlgError, FloatingPointError) as exc:
            res.status, res.error = "failed", f"{type(exc).__name__}: {exc}"
        except Exception as exc:  # noqa: BLE001 - recorded per replication
            res.status = "failed"
            res.error = f"{type(exc).__name__}: {exc} | {traceback.format_exc(limit=2)}"
        res.seconds = time.perf_counter() - t0
        out[name] = res

    def need_hmm():
        nonlocal hmm
        if hmm is None:
            hmm = fit_hmm(train, cfg)
        return hmm

    if "hmm" in methods:

        def body(res):
            h = need_hmm()
            g, path = hmm_decode_dataset(h, test)
            _score(res, g, path, truth, keep)
            res.params = h.as_model(train.dims)
            res.errors = parameter_errors(res.params, study.truth, study.truth.intensity.structure_mask)

        run("hmm", body)

    if "dknown" in methods:

        def body(res):
            d = np.concatenate([np.asarray(s) for s in study.train_states])
            disc = fit_labels(train, one_hot(d, S), cfg, aux)
            init, intensity = panel_hmm(train, study.train_states, mask, aux)
            res.params = ModelParams(train.dims, init, intensity, study.truth.emission, disc)
            _score(res, posterior_predict_dataset(res.params, test), adaptive_viterbi_dataset(res.params, test), truth, keep)
            res.selection = selection_metrics(disc.beta, support)
            res.noise_zero = bool(np.all(disc.beta[:, ~support] == 0))
            res.errors = {k: v for k, v in parameter_errors(res.params, study.truth).items() if k.startswith("beta")}

        run("dknown", body)

    if "proposed" in methods:

        def body(res):
            init = initialize(train, cfg, hmm=need_hmm())
            fr = fit(train, cfg, init)
            res.params = fr.params
            _score(res, posterior_predict_dataset(fr.params, test), adaptive_viterbi_dataset(fr.params, test), truth, keep)
            res.selection = selection_metrics(fr.params.discrim.beta, support)
            res.noise_zero = bool(np.all(fr.params.discrim.beta[:, ~support] == 0))
            res.errors = parameter_errors(fr.params, study.truth, study.truth.intensity.structure_mask)
            if "dknown" in out and out["dknown"].status == "ok":
                ref = out["dknown"].params.discrim
                res.misd = misd(fr.params.discrim.eta, ref.eta, ref.basis, sim.t_max)

        run("proposed", body)

    if "obs" in methods:

        def body(res):
            st = train.stacked()
            disc = fit_labels(train, one_hot(st.surrogate, S), cfg, aux)
            res.params = ModelParams(train.dims, study.truth.init, study.truth.intensity, study.truth.emission, disc)
            _score(res, posterior_predict_dataset(res.params, test), None, truth, keep)
            res.selection = selection_metrics(disc.beta, support)
            res.noise_zero = bool(np.all(disc.beta[:, ~support] == 0))

        run("obs", body)

    return ReplicationResult(rep, seed, {m: out[m] for m in METHODS if m in out})


def replication_seeds(seed: int, reps: int) -> list[int]:
    """Independent per-replication seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(reps)]


@dataclass
class BenchmarkResult:
    sim: SimulationConfig
    replications: list

    def rows(self) -> list[dict]:
        """One flat record per replication and method."""
        out = []
        for r in self.replications:
            for m, res in r.methods.items():
                row = {
                    "rep": r.rep,
                    "seed": r.seed,
                    "n": self.sim.n,
                    "p": self.sim.num_markers,
                    "method": m,
                    "status": res.status,
                    "acc_posterior": res.acc_posterior,
                    "acc_viterbi": res.acc_viterbi,
                }
                for k in range(4):
                    row[f"auc_{k}"] = float(res.auc[k]) if len(res.auc) > k else float("nan")
                sel = res.selection
                row.update(
                    C=sel.C if sel else float("nan"),
                    IC=sel.IC if sel else float("nan"),
                    MCC=sel.MCC if sel else float("nan"),
                    noise_zero=float(res.noise_zero) if res.noise_zero is not None else float("nan"),
                )
                for b in ("tran", "emis", "init", "beta"):
                    e = res.errors.get(b)
                    row[f"sqerr_{b}"] = float(np.mean(e * e)) if e is not None and e.size else float("nan")
                for k in range(3):
                    row[f"misd_{k + 1}"] = float(res.misd[k]) if res.misd is not None else float("nan")
                row["error"] = res.error
                out.append(row)
        return out

    def ok(self, method: str) -> list[MethodResult]:
        return [r.methods[method] for r in self.replications if method in r.methods and r.methods[method].status == "ok"]

    def failures(self, method: str) -> int:
        return sum(1 for r in self.replications if method in r.methods and r.methods[method].status != "ok")

    def summary(self) -> list[dict]:
        """Per-method means over successful replications, shaped like the
        classification and estimation tables."""
        out = []
        for m in METHODS:
            good = self.ok(m)
            if not good and not self.failures(m):
                continue
            row = {"n": self.sim.n, "p": self.sim.num_markers, "method": m, "ok": len(good), "failed": self.failures(m)}

            def mean(vals):
                vals = [v for v in vals if v is not None and np.isfinite(v)]
                return float(np.mean(vals)) if vals else float("nan")

            row["acc_posterior"] = mean([r.acc_posterior for r in good])
            row["acc_viterbi"] = mean([r.acc_viterbi for r in good])
            for k in range(4):
                row[f"auc_{k}"] = mean([r.auc[k] if len(r.auc) > k else np.nan for r in good])
            sels = [r.selection for r in good if r.selection is not None]
            row["C"] = mean([s.C for s in sels])
            row["IC"] = mean([s.IC for s in sels])
            row["MCC"] = mean([s.MCC for s in sels])
            row["noise_zero_rate"] = mean([float(r.noise_zero) for r in good if r.noise_zero is not None])
            blocks = ["tran", "emis", "init", "beta"] + [f"beta_{u + 1}" for u in range(NUM_SIGNAL)]
            for b in blocks:
                errs = [r.errors[b] for r in good if b in r.errors]
                bias, mse = bias_mse(np.vstack(errs)) if errs else (float("nan"), float("nan"))
                row[f"bias_{b}"], row[f"mse_{b}"] = bias, mse
            misds = [r.misd for r in good if r.misd is not None]
            for k in range(3):
                row[f"misd_{k + 1}"] = float(np.mean([v[k] for v in misds])) if misds else float("nan")
            out.append(row)
        return out


def _replication_task(args):
    return run_replication(*args)


def run_benchmark(
    sim: SimulationConfig,
    reps: int,
    methods=METHODS,
    fit_cfg: FitConfig | None = None,
    seed: int = 0,
    threads: int = 1,
    eval_mode: str = "all_visits",
    progress=None,
) -> BenchmarkResult:
    """Replicated simulation study.

    Replication ``r`` uses the ``r``-th seed of :func:`replication_seeds`,
    so results do not depend on ``threads``.  ``progress`` is called with
    each finished :class:`ReplicationResult`.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    fit_cfg = default_fit_config(sim) if fit_cfg is None else fit_cfg
    tasks = [(sim, fit_cfg, tuple(methods), r, s, eval_mode) for r, s in enumerate(replication_seeds(seed, reps))]
    results = []
    if threads == 1:
        for t in tasks:
            results.append(_replication_task(t))
            if progress is not None:
                progress(results[-1])
    else:
        with concurrent.futures.ProcessPoolExecutor(threads) as ex:
            for res in ex.map(_replication_task, tasks):
                results.append(res)
                if progress is not None:
                    progress(res)
    return BenchmarkResult(sim, results)
