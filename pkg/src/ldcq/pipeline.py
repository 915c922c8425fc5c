"""Staged, resumable experiment pipeline.

Layout of an output directory::

    config.txt              resolved configuration, every key spelled out
    metrics.csv             append-only rows: run_id, stage, metric, step, value, timestamp
    summary.json            latest scalar results per stage
    data/dataset.jsonl      gen-data
    vae/model.npz           train-vae
    prior/latents.npz       train-prior (posterior latents of every snippet)
    prior/model.npz         train-prior (state prior; plus goal prior on goal-based envs)
    q/<method>.npz          train-q (ldcq or bcq)
    wm/model.npz            train-wm
    eval/<mode>.json|csv    eval

A stage is skipped when its artifact exists, so deleting one artifact reruns
exactly that stage.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, stage_seed
from .data import collect_dataset, load_dataset, save_dataset, slice_snippets, stack_snippets
from .diffusion import Denoiser, make_schedule, train_prior
from .envs import make_env
from .errors import ConfigError, DependencyError
from .nn import load_modules, make_generator, save_modules
from .planner import Planner, WorldModel, train_world_model
from .policy import EvalReport, LdcqSelector, LdgcSelector, behavior_rollout, rollout
from .qlearning import (CandidateBank, DiffusionCandidates, GaussianPriorCandidates, QNet,
                        build_skill_buffer, ldcq_train, skill_transitions)
from .replay import BetaSchedule, PrioritizedBuffer
from .vae import SkillVAE, encode_snippets, train_vae

REGISTRY = {"SkillVAE": SkillVAE, "Denoiser": Denoiser, "QNet": QNet, "WorldModel": WorldModel}

ARTIFACTS = {
    "gen-data": "data/dataset.jsonl",
    "train-vae": "vae/model.npz",
    "train-prior": "prior/model.npz",
    "train-q": "q/{method}.npz",
    "train-wm": "wm/model.npz",
}

METRIC_FIELDS = ["run_id", "stage", "metric", "step", "value", "timestamp"]


def run_id(config: ExperimentConfig) -> str:
    """Hash of the resolved config; the output location does not enter it."""
    text = "".join(l for l in config.dumps().splitlines(True) if not l.startswith("out ="))
    return hashlib.sha1(text.encode()).hexdigest()[:12]


class MetricsLog:
    """Append-only CSV of ``(run_id, stage, metric, step, value, timestamp)``."""

    def __init__(self, path, rid: str):
        self.path, self.rid = Path(path), rid
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(METRIC_FIELDS)

    def log(self, stage: str, metric: str, value: float, step: int = 0) -> None:
        ts = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([self.rid, stage, metric, step, repr(float(value)), ts])

    def curve(self, stage: str, metric: str, values) -> None:
        for i, v in enumerate(values):
            self.log(stage, metric, v, i)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class PipelineResult:
    out: Path
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    reports: dict = field(default_factory=dict)


class Pipeline:
    """Runs stages of one experiment inside ``config.out``."""

    def __init__(self, config: ExperimentConfig, out=None):
        self.cfg = config
        self.out = Path(out or config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rid = run_id(config)
        self.metrics = MetricsLog(self.out / "metrics.csv", self.rid)
        self.env = make_env(config.env)
        self.dtype = config.dtype
        self._check_config_file()

    def _check_config_file(self) -> None:
        path = self.out / "config.txt"
        text = self.cfg.dumps()
        prev = path.read_text() if path.exists() else None
        if prev == text:
            return
        if prev is not None:
            # an existing run with different settings: stale artifacts must not be reused
            old = {l.split(" = ")[0]: l for l in prev.splitlines()}
            new = {l.split(" = ")[0]: l for l in text.splitlines()}
            changed = sorted(k for k in new if old.get(k) != new[k])
            eval_only = all(k.startswith("eval.") or k == "out" for k in changed)
            if not eval_only:
                raise ConfigError(f"{self.out} holds a run with different settings ({changed[:5]}); "
                                  "use a fresh output directory")
        # replace atomically so concurrent readers never see a partial file
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        tmp.write_text(text)
        os.replace(tmp, path)

    # helpers -------------------------------------------------------------------
    def path(self, stage: str, method: str | None = None) -> Path:
        return self.out / ARTIFACTS[stage].format(method=method or self.cfg.q.method)

    def done(self, stage: str, method: str | None = None) -> bool:
        return self.path(stage, method).exists()

    def require(self, stage: str, upstream: str, method: str | None = None) -> Path:
        p = self.path(upstream, method)
        if not p.exists():
            raise DependencyError(stage, f"{upstream} ({p.relative_to(self.out)})")
        return p

    def seed(self, stage: str) -> int:
        if stage == "eval" and self.cfg.eval.seed is not None:
            return int(self.cfg.eval.seed)
        return stage_seed(self.cfg.seed, stage)

    def _summary_update(self, key: str, value) -> None:
        p = self.out / "summary.json"
        data = json.loads(p.read_text()) if p.exists() else {}
        data[key] = value
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def _timing(self, stage: str, seconds: float) -> None:
        p = self.out / "timings.json"
        data = json.loads(p.read_text()) if p.exists() else {}
        data[stage] = seconds
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def dataset(self):
        return load_dataset(self.require("train-vae", "gen-data"))[1]

    def snippets(self):
        return stack_snippets(slice_snippets(self.dataset(), self.cfg.H, self.cfg.data.stride))

    def vae(self) -> SkillVAE:
        return load_modules(self.require("train-prior", "train-vae"), REGISTRY)[0]["vae"]

    def priors(self) -> dict:
        return load_modules(self.require("train-q", "train-prior"), REGISTRY)[0]

    def latents(self) -> np.ndarray:
        self.require("train-q", "train-prior")
        with np.load(self.out / "prior/latents.npz") as f:
            return f["z"]

    def schedule(self):
        return make_schedule(self.cfg.prior.T, self.cfg.prior.beta_min, self.cfg.prior.beta_max)

    def diffusion_candidates(self) -> DiffusionCandidates:
        return DiffusionCandidates(self.priors()["psi"], self.schedule(), self.cfg.guidance)

    # stages ----------------------------------------------------------------------
    def gen_data(self) -> None:
        ds = collect_dataset(self.env, self.cfg.data.episodes, self.seed("gen-data"))
        save_dataset(self.path("gen-data"), self.env.descriptor, ds)
        self.metrics.log("gen-data", "episodes", len(ds))
        self.metrics.log("gen-data", "transitions", sum(len(e) for e in ds))
        self.metrics.log("gen-data", "behavior_mean_return", np.mean([e.rewards.sum() for e in ds]))

    def train_vae(self) -> None:
        snips = self.snippets()
        vae, curve = train_vae(snips, self.cfg.vae, self.seed("train-vae"), self.dtype,
                               partial=self.cfg.data.partial_snippets)
        save_modules(self.path("train-vae"), {"vae": vae}, {"H": self.cfg.H})
        self.metrics.curve("train-vae", "loss", curve)

    def train_prior(self) -> None:
        snips = self.snippets()
        vae = self.vae()
        z = encode_snippets(vae, snips, make_generator(self.seed("encode")), sample=True)
        (self.out / "prior").mkdir(exist_ok=True)
        np.savez(self.out / "prior/latents.npz", z=z)
        keep = snips.steps_valid == self.cfg.H
        if self.cfg.data.partial_snippets:
            keep[:] = True
        s0 = snips.states[keep, 0]
        seed = self.seed("train-prior")
        psi, curve = train_prior(s0, z[keep], self.cfg.prior, seed, self.dtype)
        modules = {"psi": psi}
        self.metrics.curve("train-prior", "loss", curve)
        if self.env.descriptor.goal_dim:
            cond = np.concatenate([s0, hindsight_goals(self.dataset(), self.cfg.H, self.cfg.data.stride,
                                                       self.env.descriptor.goal_dim, seed)[keep]], 1)
            psi_g, curve_g = train_prior(cond, z[keep], self.cfg.prior, seed + 1, self.dtype)
            modules["psi_goal"] = psi_g
            self.metrics.curve("train-prior", "goal_loss", curve_g)
        save_modules(self.path("train-prior"), modules, {"H": self.cfg.H})

    def _candidates(self, method: str):
        if method == "bcq":
            return GaussianPriorCandidates(self.vae())
        return self.diffusion_candidates()

    def train_q(self, method: str | None = None) -> None:
        qc, cfg = self.cfg.q, self.cfg.q.params
        method = method or qc.method
        snips = self.snippets()
        trans = skill_transitions(snips, self.latents(), cfg.gamma)
        buf = PrioritizedBuffer(trans, cfg.per_alpha,
                                BetaSchedule(cfg.per_beta_start, cfg.per_beta_step, cfg.per_beta_every),
                                cfg.per_eps)
        seed = self.seed("train-q")
        cand = self._candidates(method)
        if qc.bank:
            cand = CandidateBank(cand, trans.next_states, trans.terminal, cfg.n_candidates,
                                 make_generator(seed + 1))
        res = ldcq_train(buf, cand, cfg, seed, self.dtype)
        save_modules(self.path("train-q", method), {"q1": res.q1, "q2": res.q2}, {"method": method})
        self.metrics.curve("train-q", f"{method}/td_loss", res.td_curve[::100])

    def train_wm(self) -> None:
        snips = self.snippets()
        trans = skill_transitions(snips, self.latents(), self.cfg.q.params.gamma)
        fit = train_world_model(trans, self.cfg.wm, self.seed("train-wm"), self.dtype, H=self.cfg.H)
        save_modules(self.path("train-wm"), {"wm": fit.model})
        self.metrics.curve("train-wm", "loss", fit.train_curve)
        for k in ("val_mse", "val_target_var", "val_median_error"):
            self.metrics.log("train-wm", k, getattr(fit, k))

    # evaluation -------------------------------------------------------------------
    def goal_pairs(self, episodes: int):
        """Fixed (start, goal) cell pairs at least ``goal_min_path`` moves apart."""
        maze = self.env
        rng = np.random.default_rng(self.cfg.eval.goal_pairs_seed)
        starts, goals = [], []
        while len(starts) < episodes:
            a = maze.cells[int(rng.integers(len(maze.cells)))]
            b = maze.cells[int(rng.integers(len(maze.cells)))]
            if maze.path_length(a, b) >= self.cfg.eval.goal_min_path:
                starts.append(maze.center(a))
                goals.append(b)
        return np.array(starts), np.array(goals, dtype=np.int64)

    def evaluate(self, mode: str | None = None, **overrides) -> EvalReport:
        mode = mode or self.cfg.eval.mode
        ev = self.cfg.eval
        episodes = overrides.get("episodes", ev.episodes)
        n = overrides.get("n_candidates", ev.n_candidates)
        seed = self.seed("eval")
        desc = self.env.descriptor
        starts = goal_cells = None
        if desc.goal_dim:
            starts, goal_cells = self.goal_pairs(episodes)
        if mode == "behavior":
            rep = behavior_rollout(self.env, episodes, seed, starts=starts, goal_cells=goal_cells,
                                   horizon=ev.horizon)
        else:
            rep = rollout(self.env, self.vae(), self._selector(mode, n, overrides), self.cfg.H,
                          episodes, seed, starts=starts, goal_cells=goal_cells, horizon=ev.horizon,
                          noise_scale=ev.noise_scale, mode=mode)
        rep.convention = _convention(desc)
        self._write_report(mode, rep)
        return rep

    def _selector(self, mode: str, n: int, overrides: dict):
        if mode in ("ldcq", "bcq"):
            q = load_modules(self.require("eval", "train-q", mode), REGISTRY)[0]["q1"]
            return LdcqSelector(q, self._candidates(mode), n)
        if mode == "ldcp":
            wm = load_modules(self.require("eval", "train-wm"), REGISTRY)[0]["wm"]
            spec = self.cfg.plan
            if "depth" in overrides or "plan_n" in overrides:
                from .planner import PlanSpec
                spec = PlanSpec(overrides.get("plan_n", spec.n), overrides.get("depth", spec.depth), spec.cost)
            return Planner(wm, self.diffusion_candidates(), spec)
        if mode == "ldgc":
            priors = self.priors()
            if "psi_goal" not in priors:
                raise ConfigError(f"{self.cfg.env} has no goal space; ldgc needs a goal-based env")
            return LdgcSelector(priors["psi_goal"], self.schedule(), self.cfg.guidance, 1)
        raise ConfigError(f"unknown eval mode {mode!r}")

    def _write_report(self, mode: str, rep: EvalReport) -> None:
        rep.save(self.out / f"eval/{mode}.json")
        rep.save(self.out / f"eval/{mode}.csv")
        s = rep.summary()
        for k in ("mean_return", "stderr", "success_rate", "mean_steps"):
            self.metrics.log("eval", f"{mode}/{k}", s[k])
        self._summary_update(f"eval/{mode}", s)
        self._timing(f"eval/{mode}", rep.wall_clock)

    # latent analysis ------------------------------------------------------------------
    def analyze(self, starts_only: bool = True, max_points: int = 600, k: int = 3,
                write: bool = True) -> dict:
        """PCA/silhouette of posterior means and prior coverage at dataset start states.

        Coverage compares one diffusion-prior and one Gaussian-prior sample per
        snippet against the posterior samples those snippets were encoded to.
        """
        from .analysis import kmeans_silhouette, mode_coverage_report, pca_project
        snips = self.snippets()
        z_post = self.latents()
        full = snips.steps_valid == self.cfg.H
        starts = np.array([sn.start for sn in slice_snippets(self.dataset(), self.cfg.H,
                                                              self.cfg.data.stride)])
        keep = full & (starts == 0) if starts_only else full
        idx = np.flatnonzero(keep)[:max_points]
        vae = self.vae()
        with torch.no_grad():
            means = vae.posterior(snips.states[idx], snips.actions[idx]).mean.numpy()
        pca = pca_project(means, 2)
        sil, labels = kmeans_silhouette(pca.projections, k, seed=self.cfg.seed)
        g = make_generator(self.seed("eval") + 17)
        s0 = torch.as_tensor(snips.states[idx, 0])
        samples = {
            "diffusion": self.diffusion_candidates()(s0, 1, g)[:, 0].numpy(),
            "gaussian": GaussianPriorCandidates(vae)(s0, 1, g)[:, 0].numpy(),
        }
        rows = mode_coverage_report(z_post[idx], samples, k=k, seed=self.cfg.seed)
        result = {"points": int(len(idx)), "silhouette": sil,
                  "explained_variance": pca.explained_variance.tolist(),
                  "coverage": [r.as_dict() for r in rows]}
        if write:
            from .plots import export_plots
            export_plots({"projections": pca.projections, "labels": labels}, "pca",
                         self.out / "analysis", svg=False)
            (self.out / "analysis/analysis.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
            self.metrics.log("analyze", "silhouette", sil)
            for r in rows:
                self.metrics.log("analyze", f"{r.prior}/in_support", r.in_support)
            self._summary_update("analyze", result)
        result["projections"] = pca.projections
        result["labels"] = labels
        return result

    # orchestration -----------------------------------------------------------------
    STAGE_FUNCS = {"gen-data": "gen_data", "train-vae": "train_vae", "train-prior": "train_prior",
                   "train-q": "train_q", "train-wm": "train_wm"}

    def run_stage(self, stage: str, force: bool = False, method: str | None = None) -> bool:
        """Run one training stage unless its artifact exists; returns whether it ran."""
        if stage not in self.STAGE_FUNCS:
            raise ConfigError(f"unknown stage {stage!r}")
        if self.done(stage, method) and not force:
            return False
        t0 = time.perf_counter()
        fn = getattr(self, self.STAGE_FUNCS[stage])
        if stage == "train-q":
            fn(method)
        else:
            fn()
        key = stage if stage != "train-q" else f"train-q/{method or self.cfg.q.method}"
        self._timing(key, time.perf_counter() - t0)
        return True


def required_stages(mode: str) -> list[tuple[str, str | None]]:
    """``(stage, q-method)`` pairs ``mode`` depends on, in execution order."""
    base = [("gen-data", None), ("train-vae", None), ("train-prior", None)]
    if mode in ("ldcq", "bcq"):
        return base + [("train-q", mode)]
    if mode == "ldcp":
        return base + [("train-wm", None)]
    return base


def run_pipeline(config: ExperimentConfig, out=None, modes=None) -> PipelineResult:
    """Run every stage needed for ``modes`` (default: the configured eval mode), then evaluate."""
    p = Pipeline(config, out)
    modes = list(modes or [config.eval.mode])
    res = PipelineResult(p.out)
    stages = []
    for m in modes:
        stages += [s for s in required_stages(m) if s not in stages]
    for s, method in stages:
        name = s if method is None else f"{s}/{method}"
        (res.ran if p.run_stage(s, method=method) else res.skipped).append(name)
    for m in modes:
        res.reports[m] = p.evaluate(m)
    return res


def hindsight_goals(dataset, H: int, stride: int, goal_dim: int, seed: int,
                    p_end: float = 0.5) -> np.ndarray:
    """One goal per snippet: its end state, or with prob ``1 - p_end`` a later state of the episode."""
    rng = np.random.default_rng(seed)
    out = []
    for ep in dataset:
        L = len(ep)
        for start in range(0, L, stride):
            end = start + min(H, L - start)
            if rng.random() < p_end or end >= L:
                k = end
            else:
                k = int(rng.integers(end, L + 1))
            out.append(ep.states[k, :goal_dim])
    return np.array(out)


def _convention(desc) -> str:
    if desc.goal_dim:
        return "success = goal cell reached within the horizon; return = 1 on success else 0"
    return "raw undiscounted return per episode (no score normalization); success = terminated before the horizon"


# sweeps --------------------------------------------------------------------------

SWEEP_FIELDS = ["method", "H", "mean_return", "stderr", "success_rate"]


def horizon_sweep(config: ExperimentConfig, H_list, out=None, methods=("ldcq",)) -> list[dict]:
    """Full pipeline per horizon with a shared seed; writes ``sweep.csv`` with one row per (method, H)."""
    if not H_list:
        raise ConfigError("H-list must be non-empty")
    root = Path(out or config.out)
    rows = []
    for H in H_list:
        for method in methods:
            overrides = {"H": int(H), "eval.mode": method}
            if method in ("ldcq", "bcq"):
                overrides["q.method"] = method
            cfg = config.updated(overrides)
            try:
                res = run_pipeline(cfg, root / f"{method}-H{H}", modes=[method])
            except Exception as e:
                e.add_note(f"horizon sweep failed at H={H} (method {method})")
                raise
            s = res.reports[method].summary()
            rows.append({"method": method, "H": int(H), "mean_return": s["mean_return"],
                         "stderr": s["stderr"], "success_rate": s["success_rate"]})
    root.mkdir(parents=True, exist_ok=True)
    with (root / "sweep.csv").open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
