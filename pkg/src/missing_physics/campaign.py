"""Sequential design campaign and the random-control baseline.

Round 1 runs the reactor with zero feed.  Every round then retrains the
network on all data so far, distills it by symbolic regression, ranks the
top-M structures and, unless it is the last round, designs the next feed
profile to discriminate between them.

Child seeds are ``sha256("<master>/<round>/<stage>")`` truncated to 64 bits.
Each round is persisted to ``round_XX/`` with a manifest that chains the
hashes of all experiment records used so far.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import expr, plant, symreg, ude
from .config import CampaignConfig
from .design import CandidateModel, DesignProblem, DesignResult, optimize_controls, resolvable
from .plant import ExperimentRecord
from .symreg import Candidate, HallOfFame

log = logging.getLogger(__name__)

PROBE_POINTS = np.geomspace(0.25, 64.0, 8)


class CampaignError(RuntimeError):
    """A sub-step failed; the message names the round and stage."""


def child_seed(master: int, round_index: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master}/{round_index}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# Monod detection ---------------------------------------------------------------

def fold_constants(program) -> tuple:
    """Collapse every variable-free subtree into a single constant."""
    program = tuple(program)

    def fold(i):
        tok = program[i]
        if not isinstance(tok, str):
            return (tok,), i + 1
        parts = []
        j = i + 1
        for _ in range(expr.ARITY[tok]):
            sub, j = fold(j)
            parts.append(sub)
        node = (tok,) + sum(parts, ())
        if all(len(p) == 1 and expr.is_const(p[0]) for p in parts):
            value = expr.evaluate(node, 1.0)
            return (float(value),), j
        return node, j

    return fold(0)[0]


def detect_monod_form(candidate, rel_tol: float = 1e-6):
    """``(a, b)`` if the expression equals ``a*C_s/(b + C_s)`` with ``b > 0``.

    Constant subtrees are folded first; anything still containing a
    transcendental operator is rejected.  Otherwise the expression is probed
    at eight points, ``a`` and ``b`` are solved from the linear relation
    ``mu*b - a*C_s = -mu*C_s``, and the fit must reproduce every probe to
    ``rel_tol``.
    """
    program = candidate.program if isinstance(candidate, Candidate) else tuple(candidate)
    folded = fold_constants(program)
    if not any(expr.is_var(t) for t in folded):
        return None
    if any(t in expr.UNARY for t in folded):
        return None
    mu = expr.evaluate(folded, PROBE_POINTS)
    if not np.all(np.isfinite(mu)):
        return None
    A = np.column_stack([-PROBE_POINTS, mu])
    rhs = -mu * PROBE_POINTS
    (a, b), *_ = np.linalg.lstsq(A, rhs, rcond=None)
    if not (np.isfinite(a) and np.isfinite(b)) or b <= 0 or a == 0:
        return None
    fit = a * PROBE_POINTS / (b + PROBE_POINTS)
    scale = np.max(np.abs(mu))
    if scale == 0 or np.max(np.abs(fit - mu)) > rel_tol * scale:
        return None
    return float(a), float(b)


def monod_matches(ranked, mu_max=0.421, K_s=4.39, a_tol=0.2, b_tol=0.3):
    """Ranked candidates in Monod form with parameters near the truth."""
    hits = []
    for cand in ranked:
        ab = detect_monod_form(cand)
        if ab and abs(ab[0] - mu_max) <= a_tol * mu_max and abs(ab[1] - K_s) <= b_tol * K_s:
            hits.append((cand, ab))
    return hits


# state ------------------------------------------------------------------------

@dataclass
class RoundResult:
    index: int
    record: ExperimentRecord
    network: ude.NetworkParams
    hof: HallOfFame
    ranked: list
    regression_inputs: np.ndarray
    regression_targets: np.ndarray
    design: DesignResult | None = None
    seeds: dict = field(default_factory=dict)
    chain: str = ""


@dataclass
class CampaignState:
    config: CampaignConfig
    rounds: list = field(default_factory=list)
    kind: str = "optimal"

    @property
    def records(self):
        return [r.record for r in self.rounds]

    @property
    def network(self):
        return self.rounds[-1].network if self.rounds else None

    @property
    def hof(self):
        return self.rounds[-1].hof if self.rounds else None

    @property
    def ranked(self):
        return self.rounds[-1].ranked if self.rounds else []

    @property
    def designs(self):
        return [r.design for r in self.rounds if r.design is not None]

    def monod_hits(self):
        p = self.config.plant
        return monod_matches(self.ranked, p.mu_max, p.K_s)


def _record_digest(record: ExperimentRecord) -> str:
    return hashlib.sha256(record.to_json().encode()).hexdigest()


def chain_digest(records) -> str:
    chain = ""
    for rec in records:
        chain = hashlib.sha256((chain + _record_digest(rec)).encode()).hexdigest()
    return chain


# stages -------------------------------------------------------------------------

def analyse(config: CampaignConfig, records, train_seed: int, symreg_seed: int):
    """Train the network on ``records`` and distill it into ranked structures."""
    known = config.plant.known()
    data = ude.TrainingSet(records, known)
    network = ude.train(data, train_seed, settings=config.ude)
    inputs = []
    for rec in records:
        sol = ude.predict(network, known, rec.profile, data.grid, config.ude.tolerances)
        if not sol.ok:
            raise RuntimeError(f"trained network failed to reproduce an experiment ({sol.reason})")
        inputs.append(sol.states[:, 0])
    inputs = np.concatenate(inputs)
    targets = ude.network_eval(network, inputs)
    log.info("trained on %d experiment(s), loss %.6g; running symbolic regression", len(records), network.loss)
    hof = symreg.search(inputs, targets, config.gp, symreg_seed)
    ranked = symreg.score_and_rank(hof, config.M)
    return network, hof, ranked, inputs, targets


def design_candidates(config: CampaignConfig, ranked) -> list:
    """Ranked structures usable for design.

    A structure must be finite on ``(0, C_s_in]`` and must integrate within
    ``config.de.screen_steps`` solver steps under both constant extreme feeds.
    """
    p = config.plant
    out = []
    for i, cand in enumerate(ranked):
        model = CandidateModel(cand.program, i)
        if not model.finite_on(p.C_s_in):
            log.info("dropping %s from design: undefined on (0, C_s_in]", cand.equation)
        elif not resolvable(model, p.known(), p.grid, p.u_min, p.u_max, config.ude.tolerances,
                            config.de.screen_steps):
            log.info("dropping %s from design: not integrable within %d steps", cand.equation,
                     config.de.screen_steps)
        else:
            out.append(model)
    return out


def design_next(config: CampaignConfig, ranked, seed: int) -> DesignResult:
    p = config.plant
    models = design_candidates(config, ranked)
    if len(models) < 2:
        # nothing to discriminate: fall back to a uniform random profile
        rng = np.random.Generator(np.random.PCG64(seed))
        prof = p.profile(rng.uniform(p.u_min, p.u_max, p.N))
        return DesignResult(prof, float("nan"), 0, [])
    problem = DesignProblem(models, p.known(), p.grid, p.u_min, p.u_max, config.ude.tolerances)
    return optimize_controls(problem, seed=seed, settings=config.de)


def random_profile(config: CampaignConfig, seed: int):
    p = config.plant
    rng = np.random.Generator(np.random.PCG64(seed))
    return p.profile(rng.uniform(p.u_min, p.u_max, p.N))


def run_round(config: CampaignConfig, previous, index: int, profile, design: bool) -> RoundResult:
    """Execute experiment ``index`` (1-based) under ``profile`` and analyse all data."""
    master = config.seed
    seeds = {
        "noise": child_seed(master, index, "noise"),
        "train": child_seed(master, index, "train"),
        "symreg": child_seed(master, index, "symreg"),
    }
    stage = "experiment"
    try:
        record = plant.run_experiment(config.plant, profile, seeds["noise"])
        record.label = f"round {index}"
        records = list(previous) + [record]
        stage = "analysis"
        network, hof, ranked, x, y = analyse(config, records, seeds["train"], seeds["symreg"])
        result = RoundResult(index, record, network, hof, ranked, x, y, seeds=seeds,
                             chain=chain_digest(records))
        if design:
            stage = "design"
            log.info("round %d: designing next experiment", index)
            seeds["design"] = child_seed(master, index, "design")
            result.design = design_next(config, ranked, seeds["design"])
    except Exception as exc:
        raise CampaignError(f"round {index}, {stage} stage: {exc}") from exc
    return result


def run_optimal_campaign(config: CampaignConfig, out_dir=None, rounds: int | None = None) -> CampaignState:
    n = rounds or config.n_experiments
    state = CampaignState(config)
    profile = config.plant.zero_profile()
    for r in range(1, n + 1):
        log.info("optimal campaign seed %d: round %d/%d", config.seed, r, n)
        result = run_round(config, state.records, r, profile, design=r < n)
        state.rounds.append(result)
        if out_dir is not None:
            write_round(Path(out_dir), result, config)
        if result.design is not None:
            profile = result.design.profile
    if out_dir is not None:
        write_summary(Path(out_dir), state)
    return state


def run_random_baseline(config: CampaignConfig, n_repeats: int, out_dir=None) -> list:
    """Campaigns whose every experiment uses a uniformly random feed profile."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    states = []
    for rep in range(1, n_repeats + 1):
        rep_config = config.with_overrides(seed=child_seed(config.seed, rep, "baseline"))
        state = CampaignState(rep_config, kind="random")
        records = []
        for r in range(1, config.n_experiments + 1):
            prof = random_profile(rep_config, child_seed(rep_config.seed, r, "profile"))
            rec = plant.run_experiment(config.plant, prof, child_seed(rep_config.seed, r, "noise"))
            rec.label = f"random repeat {rep} round {r}"
            records.append(rec)
        n = config.n_experiments
        try:
            network, hof, ranked, x, y = analyse(
                rep_config, records,
                child_seed(rep_config.seed, n, "train"),
                child_seed(rep_config.seed, n, "symreg"),
            )
        except Exception as exc:
            raise CampaignError(f"baseline repeat {rep}, analysis stage: {exc}") from exc
        for i, rec in enumerate(records, 1):
            last = i == n
            state.rounds.append(RoundResult(
                i, rec, network if last else None, hof if last else None,
                ranked if last else [], x if last else None, y if last else None,
                chain=chain_digest(records[:i]),
            ))
        if out_dir is not None:
            rep_dir = Path(out_dir) / f"repeat_{rep:02d}"
            for res in state.rounds:
                write_round(rep_dir, res, rep_config)
            write_summary(rep_dir, state)
        states.append(state)
    return states


# persistence --------------------------------------------------------------------

def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def round_dir(out_dir: Path, index: int) -> Path:
    return Path(out_dir) / f"round_{index:02d}"


def write_round(out_dir: Path, result: RoundResult, config: CampaignConfig):
    d = round_dir(out_dir, result.index)
    _write(d / "experiment.json", result.record.to_json())
    _write(d / "experiment.csv", result.record.to_csv())
    files = ["experiment.json", "experiment.csv"]
    if result.network is not None:
        _write(d / "network.json", result.network.to_json())
        _write(d / "hall_of_fame.json", result.hof.to_json())
        ranked = [c.to_dict() for c in result.ranked]
        _write(d / "ranked.json", _dump(ranked))
        _write(d / "hall_of_fame.txt", symreg.format_table(result.ranked))
        rows = ["C_s,network_mu"] + [
            f"{float(a)!r},{float(b)!r}" for a, b in zip(result.regression_inputs, result.regression_targets)
        ]
        _write(d / "regression_data.csv", "\n".join(rows) + "\n")
        files += ["network.json", "hall_of_fame.json", "ranked.json", "hall_of_fame.txt",
                  "regression_data.csv"]
    if result.design is not None:
        _write(d / "design.json", result.design.to_json())
        _write(d / "design.csv", result.design.to_csv())
        files += ["design.json", "design.csv"]
    manifest = {
        "round": result.index,
        "config_sha256": config.digest(),
        "seeds": result.seeds,
        "record_sha256": _record_digest(result.record),
        "training_chain_sha256": result.chain,
        "files": files,
    }
    _write(d / "manifest.json", _dump(manifest))


def write_summary(out_dir: Path, state: CampaignState):
    hits = state.monod_hits()
    summary = {
        "kind": state.kind,
        "config": state.config.to_dict(),
        "config_sha256": state.config.digest(),
        "rounds": len(state.rounds),
        "final_ranked": [c.to_dict() for c in state.ranked],
        "monod_recovered": bool(hits),
        "monod_parameters": [list(ab) for _, ab in hits],
    }
    _write(Path(out_dir) / "campaign.json", _dump(summary))
    _write(Path(out_dir) / "config.txt", state.config.to_text())


def load_records(out_dir) -> list:
    out = []
    i = 1
    while (round_dir(out_dir, i) / "experiment.json").exists():
        out.append(ExperimentRecord.from_json((round_dir(out_dir, i) / "experiment.json").read_text()))
        i += 1
    return out


def load_design(out_dir, index: int) -> DesignResult:
    d = json.loads((round_dir(out_dir, index) / "design.json").read_text())
    from .ode import ControlProfile

    return DesignResult(ControlProfile.from_dict(d["profile"]), d["objective"], d["evaluations"], [])


def replay_round(config: CampaignConfig, out_dir, index: int, scratch_dir) -> RoundResult:
    """Re-run round ``index`` from the persisted state of the rounds before it."""
    records = load_records(out_dir)[: index - 1]
    profile = config.plant.zero_profile() if index == 1 else load_design(out_dir, index - 1).profile
    result = run_round(config, records, index, profile, design=index < config.n_experiments)
    write_round(Path(scratch_dir), result, config)
    return result
