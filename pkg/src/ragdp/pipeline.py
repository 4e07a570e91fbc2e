"""Pipeline stages over an output directory with a checksummed manifest.

Every stage resolves its inputs through ``manifest.json``, re-hashes them,
and refuses to run on missing or tampered artifacts. Outputs and the
manifest are byte-identical across reruns with the same config; wall-clock
timings go to ``timings.json`` instead.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .accountant import calibrate_sigma
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, generate_dataset
from .diffusion import Denoiser, make_schedule, pretrain_denoiser, sample_full, forward_diffuse
from .dp import DpConfig, dp_finetune, rag_inference
from .features import AugmentConfig, ContrastiveConfig, extract_features, train_extractor
from .kb import KbManifest, build_kb, load_kb, retrieval_label_accuracy, save_kb
from .metrics import coverage, efficiency_report, sample_frechet

ARTIFACTS = {
    "pub_pre": "data/pub_pre.rpds",
    "pub_ref": "data/pub_ref.rpds",
    "prv": "data/prv.rpds",
    "denoiser_pre": "denoiser_pre.rpdn",
    "extractor": "extractor.rpdn",
    "kb": "kb.rpkb",
    "denoiser_dp": "denoiser_dp.rpdn",
    "ledger": "ledger.json",
    "dp_run": "dp_run.json",
    "samples_rag": "samples_rag.rpds",
    "samples_full": "samples_full.rpds",
    "eval": "eval.json",
}

PRODUCER = {
    "pub_pre": "data", "pub_ref": "data", "prv": "data",
    "denoiser_pre": "pretrain", "extractor": "train-extractor", "kb": "build-kb",
    "denoiser_dp": "dp-finetune", "ledger": "dp-finetune", "dp_run": "dp-finetune",
    "samples_rag": "sample", "samples_full": "sample", "eval": "evaluate",
}

STAGES = ("data", "pretrain", "train-extractor", "build-kb", "dp-finetune", "sample", "evaluate")


class PipelineError(RuntimeError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> str:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


class Manifest:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.path = self.out / "manifest.json"
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())
            if self.doc["config_sha256"] != cfg.digest():
                raise PipelineError(
                    f"config differs from the one frozen in {self.path}; use a fresh --out"
                )
        else:
            self.doc = {
                "config": cfg.to_dict(), "config_sha256": cfg.digest(),
                "artifacts": {}, "stages": {},
            }

    def require(self, name: str) -> Path:
        entry = self.doc["artifacts"].get(name)
        if entry is None:
            raise PipelineError(
                f"missing artifact {name!r}; run stage {PRODUCER[name]!r} first"
            )
        path = self.out / entry["path"]
        if not path.exists():
            raise PipelineError(f"artifact {name!r} not found at {path}")
        if sha256_file(path) != entry["sha256"]:
            raise PipelineError(f"artifact {name!r} at {path} fails its checksum")
        return path

    def sha(self, name: str) -> str:
        return self.doc["artifacts"][name]["sha256"]

    def record(self, stage: str, inputs: list[str], outputs: dict[str, str], metrics=None):
        for name, digest in outputs.items():
            self.doc["artifacts"][name] = {"path": ARTIFACTS[name], "sha256": digest, "stage": stage}
        self.doc["stages"][stage] = {
            "inputs": {n: self.sha(n) for n in inputs},
            "outputs": {n: outputs[n] for n in sorted(outputs)},
            "metrics": metrics or {},
        }
        _write_json(self.path, self.doc)

    def timing(self, key: str, seconds: float) -> None:
        path = self.out / "timings.json"
        t = json.loads(path.read_text()) if path.exists() else {}
        t[key] = seconds
        path.write_text(json.dumps(t, sort_keys=True, indent=1) + "\n")

    def timings(self) -> dict:
        path = self.out / "timings.json"
        return json.loads(path.read_text()) if path.exists() else {}


def _open(cfg: ExperimentConfig, out) -> Manifest:
    out = Path(out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    return Manifest(out, cfg)


def _schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end, s.kind)


def _load_data(m: Manifest, name: str) -> Dataset:
    return Dataset.load(m.require(name))


def stage_data(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    d = cfg.data
    prv_params = {**d.params, **d.prv_shift}
    specs = {
        "pub_pre": (d.params, d.n_pub_pre),
        "pub_ref": (d.params, d.n_pub_ref),
        "prv": (prv_params, d.n_prv),
    }
    outputs = {}
    for role, (params, n) in specs.items():
        ds = generate_dataset(d.generator, params, n, cfg.stage_seed(f"data:{role}"), role)
        outputs[role] = ds.save(m.out / ARTIFACTS[role])
    m.record("data", [], outputs, {"sizes": {r: n for r, (_, n) in specs.items()}})
    return outputs


def stage_pretrain(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    data = _load_data(m, "pub_pre").require_role("pub_pre")
    rng = np.random.default_rng(cfg.stage_seed("pretrain"))
    schedule = _schedule(cfg)
    dc = cfg.denoiser
    n_classes = data.n_classes if cfg.data.conditional else 0
    den = Denoiser.build(data.dim, schedule.T, dc.hidden, dc.activation, dc.temb_dim,
                         n_classes, dc.class_dim, rng)
    start = time.perf_counter()
    den, state, hist = pretrain_denoiser(
        den, data.points, schedule, cfg.pretrain.steps, cfg.pretrain.batch_size, rng,
        cfg.pretrain.learning_rate, data.labels,
    )
    m.timing("pretrain", time.perf_counter() - start)
    digest = save_checkpoint(
        Checkpoint(den, "denoiser", 0, state, {"pub_pre": m.sha("pub_pre")}),
        m.out / ARTIFACTS["denoiser_pre"],
    )
    final = float(np.mean(hist[-50:])) if hist else None
    m.record("pretrain", ["pub_pre"], {"denoiser_pre": digest}, {"final_loss": final})
    return {"final_loss": final}


def _aug(cfg: ExperimentConfig) -> AugmentConfig:
    e = cfg.extractor
    return AugmentConfig(e.jitter_sigma, tuple(e.scale_range), e.rotation_max_radians)


def _contrastive(cfg: ExperimentConfig) -> ContrastiveConfig:
    e = cfg.extractor
    return ContrastiveConfig(e.temperature, e.negatives_per_anchor, "cosine", cfg.k,
                             e.epochs, e.batch_size, e.learning_rate)


def stage_train_extractor(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    den = load_checkpoint(m.require("denoiser_pre"), "denoiser").model
    ref = _load_data(m, "pub_ref").require_role("pub_ref")
    rng = np.random.default_rng(cfg.stage_seed("train-extractor"))
    start = time.perf_counter()
    h, hist = train_extractor(den, ref.points, _contrastive(cfg), _aug(cfg), _schedule(cfg),
                              rng, hidden=tuple(cfg.extractor.hidden),
                              feature_dim=cfg.extractor.feature_dim)
    m.timing("train-extractor", time.perf_counter() - start)
    digest = save_checkpoint(
        Checkpoint(h, "extractor", cfg.k, None,
                   {"denoiser_pre": m.sha("denoiser_pre"), "pub_ref": m.sha("pub_ref")}),
        m.out / ARTIFACTS["extractor"],
    )
    m.record("train-extractor", ["denoiser_pre", "pub_ref"], {"extractor": digest},
             {"epoch_losses": hist.epoch_losses})
    return {"epoch_losses": hist.epoch_losses}


def _models(m: Manifest, cfg: ExperimentConfig):
    den = load_checkpoint(m.require("denoiser_pre"), "denoiser").model
    h = load_checkpoint(m.require("extractor"), "extractor", cfg.k).model
    return den, h


def stage_build_kb(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    den, h = _models(m, cfg)
    ref = _load_data(m, "pub_ref").require_role("pub_ref")
    schedule = _schedule(cfg)
    n = len(ref) if cfg.kb.size is None else cfg.kb.size
    if n > len(ref):
        raise PipelineError(f"kb.size={n} exceeds the reference split ({len(ref)})")
    seed = cfg.stage_seed("build-kb")
    manifest = KbManifest(
        bytes.fromhex(m.sha("denoiser_pre")), bytes.fromhex(m.sha("extractor")),
        schedule.digest(), seed,
    )
    start = time.perf_counter()
    kb = build_kb(ref.points[:n], den, h, schedule, cfg.k, cfg.v, seed,
                  None if ref.labels is None else ref.labels[:n],
                  cfg.kb.entries_per_example, manifest)
    m.timing("kb_build_time", time.perf_counter() - start)
    digest = save_kb(kb, m.out / ARTIFACTS["kb"]).hex()
    metrics = {"entries": len(kb), "denoiser_calls": den.calls}
    m.record("build-kb", ["denoiser_pre", "extractor", "pub_ref"], {"kb": digest}, metrics)
    return metrics


def _load_kb(m: Manifest, cfg: ExperimentConfig):
    return load_kb(m.require("kb"), bytes.fromhex(m.sha("denoiser_pre")),
                   bytes.fromhex(m.sha("extractor")), _schedule(cfg).digest())


def dp_config(cfg: ExperimentConfig) -> DpConfig:
    d = cfg.dp
    sigma = d.noise_scale
    if sigma is None:
        sigma = calibrate_sigma(d.target_epsilon, d.delta, d.iterations)
    return DpConfig(d.clip_norm, sigma, d.expected_batch, d.iterations, cfg.k, cfg.v,
                    d.delta, cfg.stage_seed("dp-finetune"), d.learning_rate,
                    d.epsilon_budget, d.v_draws, d.retrieval_topk)


def stage_dp_finetune(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    den, h = _models(m, cfg)
    kb = _load_kb(m, cfg)
    prv = _load_data(m, "prv").require_role("prv")
    dcfg = dp_config(cfg)
    labels = prv.labels if den.n_classes else None
    tuned, rec = dp_finetune(den.copy(), prv.points, kb, h, _schedule(cfg), dcfg,
                             labels=labels, projector=den)
    m.timing("dp-finetune", rec.wall_clock)
    inputs = ["denoiser_pre", "extractor", "kb", "prv"]
    digest = save_checkpoint(
        Checkpoint(tuned, "denoiser", 0, None, {n: m.sha(n) for n in inputs}),
        m.out / ARTIFACTS["denoiser_dp"],
    )
    ledger_doc = rec.ledger.summary(dcfg.delta) if rec.ledger else {"disabled": True}
    ledger_sha = _write_json(m.out / ARTIFACTS["ledger"], ledger_doc)
    run_sha = _write_json(m.out / ARTIFACTS["dp_run"], {
        "dp_config": asdict(dcfg),
        "iterations": [asdict(r) for r in rec.iterations],
        "checksum_before": rec.checksum_before,
        "checksum_after": rec.checksum_after,
    })
    metrics = {
        "dp_config": asdict(dcfg),
        "epsilon": ledger_doc.get("epsilon"),
        "delta": dcfg.delta,
        "best_alpha": ledger_doc.get("best_alpha"),
        "input_checksums": {n: m.sha(n) for n in inputs},
    }
    m.record("dp-finetune", inputs,
             {"denoiser_dp": digest, "ledger": ledger_sha, "dp_run": run_sha}, metrics)
    return metrics


def _sample_steps(cfg: ExperimentConfig):
    s = cfg.sample
    early = cfg.schedule.T - cfg.k if s.steps_early is None else s.steps_early
    late = cfg.v if s.steps_late is None else s.steps_late
    full = cfg.schedule.T if s.full_steps is None else s.full_steps
    return early, late, full


def stage_sample(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    den_pre, h = _models(m, cfg)
    tuned = load_checkpoint(m.require("denoiser_dp"), "denoiser").model
    schedule = _schedule(cfg)
    early, late, full = _sample_steps(cfg)
    outputs, metrics, inputs = {}, {}, ["denoiser_dp", "denoiser_pre", "extractor"]
    for mode in cfg.sample.modes:
        rng = np.random.default_rng(cfg.stage_seed(f"sample:{mode}"))
        start = time.perf_counter()
        if mode == "rag":
            kb = _load_kb(m, cfg)
            inputs.append("kb")
            pts, calls = rag_inference(tuned, kb, h, schedule, cfg.sample.n_samples,
                                       cfg.k, cfg.v, early, late, rng, projector=den_pre)
        elif mode == "full":
            before = tuned.calls
            pts = sample_full(tuned, cfg.sample.n_samples, schedule, rng, full)
            calls = (tuned.calls - before) // max(cfg.sample.n_samples, 1)
        else:
            raise PipelineError(f"unknown sampling mode {mode!r}")
        m.timing(f"sample:{mode}", time.perf_counter() - start)
        name = f"samples_{mode}"
        ds = Dataset(pts, None, "syn", cfg.data.generator, {"mode": mode}, cfg.stage_seed(f"sample:{mode}"))
        outputs[name] = ds.save(m.out / ARTIFACTS[name])
        metrics[mode] = {"n_samples": cfg.sample.n_samples, "denoiser_calls": int(calls)}
    m.record("sample", sorted(set(inputs)), outputs, metrics)
    return metrics


def stage_evaluate(cfg: ExperimentConfig, out) -> dict:
    m = _open(cfg, out)
    prv = _load_data(m, "prv").points
    schedule = _schedule(cfg)
    den_pre, h = _models(m, cfg)
    kb = _load_kb(m, cfg)
    nn = cfg.eval.nn_size
    sample_metrics = m.doc["stages"].get("sample", {}).get("metrics", {})
    n_eval = cfg.sample.n_samples
    rng = np.random.default_rng(cfg.stage_seed("evaluate"))
    sets = {}
    for mode in sample_metrics:
        sets[f"dp_{mode}"] = Dataset.load(m.require(f"samples_{mode}")).points
    # Baselines: public-only model and raw noise.
    sets["pretrained_full"] = sample_full(den_pre, n_eval, schedule, rng)
    sets["gaussian_noise"] = rng.standard_normal((n_eval, prv.shape[1]))
    quality = {
        name: {"frechet": sample_frechet(pts, prv), "coverage": coverage(prv, pts, nn)}
        for name, pts in sets.items()
    }
    # Retrieval coherence on fresh public-distribution queries.
    retrieval = None
    if np.all(kb.labels >= 0):
        q = generate_dataset(cfg.data.generator, cfg.data.params,
                             cfg.eval.n_retrieval_queries, cfg.stage_seed("eval:queries"), "pub_ref")
        if q.labels is not None:
            x_k = forward_diffuse(q.points, cfg.k, rng.standard_normal(q.points.shape), schedule)
            z = extract_features(h, den_pre, x_k, cfg.k, schedule)
            retrieval = {f"top{t}": retrieval_label_accuracy(kb, z, q.labels, t) for t in (1, 5)}
    _, _, full = _sample_steps(cfg)
    eff = efficiency_report([
        {"mode": mode, "n_samples": v["n_samples"], "denoiser_calls": v["denoiser_calls"],
         "full_steps": full}
        for mode, v in sample_metrics.items()
    ])
    doc = {"quality": quality, "retrieval": retrieval, "efficiency": eff,
           "reference": "prv", "nn_size": nn}
    digest = _write_json(m.out / ARTIFACTS["eval"], doc)
    inputs = ["prv", "denoiser_pre", "extractor", "kb"] + [f"samples_{k}" for k in sample_metrics]
    m.record("evaluate", inputs, {"eval": digest}, doc)
    # Wall-clock rows vary run to run, so they live outside the manifest.
    t = m.timings()
    timed = [dict(r, wall_clock=t.get(f"sample:{r['mode']}"), kb_build_time=t.get("kb_build_time"))
             for r in eff]
    (m.out / "efficiency.json").write_text(json.dumps(timed, indent=1) + "\n")
    return doc


STAGE_FUNCS = {
    "data": stage_data,
    "pretrain": stage_pretrain,
    "train-extractor": stage_train_extractor,
    "build-kb": stage_build_kb,
    "dp-finetune": stage_dp_finetune,
    "sample": stage_sample,
    "evaluate": stage_evaluate,
}


def run_pipeline(cfg: ExperimentConfig, out) -> dict:
    result = {}
    for stage in STAGES:
        result[stage] = STAGE_FUNCS[stage](cfg, out)
    return result
