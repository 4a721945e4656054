"""Command-line entry point for reproducible experiments.

Subcommands: synth (generate a synthetic dataset + ground truth), ingest
(validate data files), train, eval / ope / bdesr (policy evaluation),
ablate (component, note-strategy and window sweeps), cross-eval (train
cohort A, evaluate on cohort B), report (collect run outputs into CSV/JSON
tables and plot-data files).

Every run writes the exact resolved configuration next to its outputs;
re-running with the same config and seed reproduces every artifact
bit-for-bit. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.

The default output root is $CAREQL_OUT (falling back to ./careql_runs).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bdesr as bdesr_mod
from . import dataset as ds_mod
from . import ope as ope_mod
from . import synthgym as gym_mod
from . import trainer as tr_mod
from .encoder import EncoderConfig, NoteStrategy
from .netcore import NonFiniteGradientError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_OUT_ROOT = "CAREQL_OUT"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "dataset": {
        "source": "synth",
        "synth": {
            "n_severity": 5, "n_context": 3, "n_features": 42, "d_n": 64,
            "gamma": 0.95, "term_prob_mid": 0.25, "term_prob_edge": 0.55,
            "noise_structured": 0.3, "noise_note": 0.1, "note_prob": 0.7,
            "min_gap": 0.08, "behavior_epsilon": 0.3,
            "n_episodes": 2000, "max_len": 18,
            "split_fractions": [1.0, 0.0, 0.0], "seed": 0,
        },
        "files": {"structured": "", "notes": "", "manifest": "",
                  "ground_truth": ""},
        "normalize": True,
        "share_bins": False,
    },
    "modality": "multimodal",
    "encoder": {
        "d": 64, "d_k": 32, "depth": 2, "strategy": "context", "window": 3,
        "use_attention": True,
    },
    "train": {
        "algorithm": "cql", "total_steps": 5000, "batch_size": 256,
        "learning_rate": 1e-4, "gamma": 0.99, "cql_alpha": 2.0,
        "bcq_threshold": 0.3, "target_update": 1000, "hidden_width": 512,
        "trunk_depth": 3, "eval_interval": 500, "grad_clip": None,
        "freeze_encoders": False,
    },
    "ope": {
        "gamma": 0.99, "n_bootstrap": 200, "eps_soft": 0.01,
        "clip_percentile": 99.0, "behavior": "auto",
        "behavior_floor": 1e-3, "behavior_fit_steps": 2000,
        "fqe_iterations": 25, "fqe_steps": 120, "fqe_width": 64,
        "fqe_depth": 2,
    },
    "bdesr": {"alpha": 0.5, "beta": 0.5, "p": 20.0},
    "ablate": {
        "strategies": ["raw", "impute", "stack", "context"],
        "windows": [3, 5, 7],
    },
    "cross_eval": {"snapshot_points": 8},
    "seeds": [0, 1, 2, 3, 4],
    "seed": 0,
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{here}: unknown configuration key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected an object")
            merged[key] = _deep_merge(base[key], value, here)
        else:
            merged[key] = value
    return merged


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _validate_config(cfg: dict) -> None:
    d = cfg["dataset"]
    _check(d["source"] in ("synth", "files"), "dataset.source",
           "must be 'synth' or 'files'")
    s = d["synth"]
    for key in ("n_severity", "n_context", "n_features", "d_n", "n_episodes",
                "max_len"):
        _check(isinstance(s[key], int) and s[key] >= 1,
               f"dataset.synth.{key}", "expected a positive integer")
    _check(0.0 <= s["gamma"] < 1.0, "dataset.synth.gamma", "must be in [0, 1)")
    _check(0.0 < s["behavior_epsilon"] < 1.0, "dataset.synth.behavior_epsilon",
           "must be in (0, 1)")
    fr = s["split_fractions"]
    _check(isinstance(fr, list) and len(fr) == 3 and
           abs(sum(fr) - 1.0) < 1e-9 and min(fr) >= 0.0,
           "dataset.synth.split_fractions", "must be 3 fractions summing to 1")
    if d["source"] == "files":
        for key in ("structured", "notes", "manifest"):
            _check(bool(d["files"][key]), f"dataset.files.{key}",
                   "required when dataset.source is 'files'")
    _check(cfg["modality"] in tr_mod.MODALITIES, "modality",
           f"must be one of {tr_mod.MODALITIES}")
    e = cfg["encoder"]
    for key in ("d", "d_k", "depth", "window"):
        _check(isinstance(e[key], int) and e[key] >= (0 if key == "depth" else 1),
               f"encoder.{key}", "expected a nonnegative integer")
    _check(e["strategy"] in ("raw", "impute", "stack", "context"),
           "encoder.strategy", "must be raw|impute|stack|context")
    t = cfg["train"]
    _check(t["algorithm"] in tr_mod.ALGORITHMS, "train.algorithm",
           f"must be one of {tr_mod.ALGORITHMS}")
    for key in ("total_steps", "batch_size", "target_update", "hidden_width",
                "trunk_depth", "eval_interval"):
        _check(isinstance(t[key], int) and t[key] >= 1, f"train.{key}",
               "expected a positive integer")
    _check(0.0 <= t["gamma"] < 1.0, "train.gamma", "must be in [0, 1)")
    _check(t["cql_alpha"] >= 0.0, "train.cql_alpha", "must be >= 0")
    _check(0.0 <= t["bcq_threshold"] <= 1.0, "train.bcq_threshold",
           "must be in [0, 1]")
    o = cfg["ope"]
    _check(0.0 <= o["gamma"] < 1.0, "ope.gamma", "must be in [0, 1)")
    _check(isinstance(o["n_bootstrap"], int) and o["n_bootstrap"] >= 2,
           "ope.n_bootstrap", "expected an integer >= 2")
    _check(0.0 < o["eps_soft"] < 1.0, "ope.eps_soft", "must be in (0, 1)")
    _check(o["behavior"] in ("auto", "logged", "fitted"), "ope.behavior",
           "must be auto|logged|fitted")
    b = cfg["bdesr"]
    _check(b["alpha"] >= 0 and b["beta"] >= 0
           and abs(b["alpha"] + b["beta"] - 1.0) < 1e-9,
           "bdesr.alpha", "weights must be nonnegative and sum to 1")
    _check(0.0 < b["p"] < 50.0, "bdesr.p", "must be in (0, 50)")
    _check(isinstance(cfg["seeds"], list) and cfg["seeds"]
           and all(isinstance(x, int) for x in cfg["seeds"]),
           "seeds", "expected a nonempty list of integers")
    for kind in cfg["ablate"]["strategies"]:
        _check(kind in ("raw", "impute", "stack", "context"),
               "ablate.strategies", f"unknown strategy {kind!r}")
    _check(all(isinstance(w, int) and w >= 1 for w in cfg["ablate"]["windows"]),
           "ablate.windows", "expected positive integers")


def load_config(path: str | Path | None) -> dict:
    if path is None:
        cfg = copy.deepcopy(DEFAULT_CONFIG)
    else:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})")
        if not isinstance(user, dict):
            raise ConfigError(f"config {path}: top level must be an object")
        cfg = _deep_merge(DEFAULT_CONFIG, user)
    _validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _generator_config(cfg: dict) -> gym_mod.GeneratorConfig:
    s = cfg["dataset"]["synth"]
    return gym_mod.GeneratorConfig(
        n_severity=s["n_severity"], n_context=s["n_context"],
        n_features=s["n_features"], d_n=s["d_n"], gamma=s["gamma"],
        term_prob_mid=s["term_prob_mid"], term_prob_edge=s["term_prob_edge"],
        noise_structured=s["noise_structured"], noise_note=s["noise_note"],
        note_prob=s["note_prob"], min_gap=s["min_gap"],
    )


def _encoder_config(cfg: dict, dataset: ds_mod.OfflineDataset,
                    strategy: str | None = None,
                    window: int | None = None,
                    use_attention: bool | None = None) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(
        n_features=dataset.n_features, d_n=dataset.d_n, d=e["d"], d_k=e["d_k"],
        depth=e["depth"],
        strategy=NoteStrategy(strategy or e["strategy"],
                              window if window is not None else e["window"]),
        use_attention=e["use_attention"] if use_attention is None else use_attention,
    )


def _train_config(cfg: dict, seed: int, algorithm: str | None = None,
                  total_steps: int | None = None) -> tr_mod.TrainConfig:
    t = cfg["train"]
    return tr_mod.TrainConfig(
        total_steps=total_steps or t["total_steps"], batch_size=t["batch_size"],
        learning_rate=t["learning_rate"], gamma=t["gamma"],
        cql_alpha=t["cql_alpha"], bcq_threshold=t["bcq_threshold"],
        target_update=t["target_update"], seed=seed,
        algorithm=algorithm or t["algorithm"], hidden_width=t["hidden_width"],
        trunk_depth=t["trunk_depth"], eval_interval=t["eval_interval"],
        grad_clip=t["grad_clip"], freeze_encoders=t["freeze_encoders"],
    )


def _ope_config(cfg: dict, seed: int) -> ope_mod.OpeConfig:
    o = cfg["ope"]
    return ope_mod.OpeConfig(
        gamma=o["gamma"], n_bootstrap=o["n_bootstrap"], eps_soft=o["eps_soft"],
        clip_percentile=o["clip_percentile"], seed=seed,
        fqe=ope_mod.FqeNetConfig(iterations=o["fqe_iterations"],
                                 steps_per_iteration=o["fqe_steps"],
                                 width=o["fqe_width"], depth=o["fqe_depth"],
                                 seed=seed),
    )


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(ENV_OUT_ROOT, "careql_runs"))
        out = root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_provenance(out: Path, cfg: dict, seed: int) -> None:
    resolved = copy.deepcopy(cfg)
    resolved["seed"] = seed
    _write_json(out / "resolved_config.json", resolved)


def _load_bundle(data_dir: str | Path, cfg: dict):
    """Dataset files + optional ground truth; normalization per config."""
    data = Path(data_dir)
    dataset = ds_mod.ingest(data / "structured.csv", data / "notes.jsonl",
                            data / "manifest.json")
    gt = None
    gt_path = Path(cfg["dataset"]["files"]["ground_truth"]) \
        if cfg["dataset"]["files"]["ground_truth"] else data / "ground_truth.json"
    if gt_path.exists():
        gt = gym_mod.load_ground_truth(gt_path)
        dataset = gym_mod.attach_ground_truth(dataset, gt)
    if cfg["dataset"]["normalize"]:
        dataset = ds_mod.normalize(dataset)
    return dataset, gt


def _behavior_model(cfg: dict, dataset: ds_mod.OfflineDataset, seed: int):
    mode = cfg["ope"]["behavior"]
    has_logged = all(tr.behavior_prob is not None
                     for ep in dataset.episodes for tr in ep.transitions)
    if mode == "logged" or (mode == "auto" and has_logged):
        if not has_logged:
            raise ds_mod.DatasetError(
                "ope.behavior is 'logged' but the dataset has no logged "
                "behavior probabilities; use 'fitted'")
        return ope_mod.LoggedBehavior()
    fit_cfg = ope_mod.BehaviorFitConfig(floor=cfg["ope"]["behavior_floor"],
                                        steps=cfg["ope"]["behavior_fit_steps"],
                                        seed=seed)
    return ope_mod.fit_behavior(dataset, cfg=fit_cfg)


def _eval_split(dataset: ds_mod.OfflineDataset):
    test = dataset.split_episodes("test")
    return test if test else list(dataset.episodes)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["dataset"]["synth"]["seed"]
    out = _out_dir(args, "synth")
    gen_cfg = _generator_config(cfg)
    s = cfg["dataset"]["synth"]
    mdp = gym_mod.generate_mdp(gen_cfg, seed=seed)
    behavior = gym_mod.near_clinician_behavior(mdp, s["behavior_epsilon"])
    dataset = gym_mod.rollout(mdp, behavior, n_episodes=s["n_episodes"],
                              max_len=s["max_len"], seed=seed,
                              split_fractions=tuple(s["split_fractions"]))
    paths = ds_mod.export(dataset, out)
    gym_mod.write_ground_truth(out / "ground_truth.json", mdp, behavior, dataset)
    _write_provenance(out, cfg, seed)
    print(f"wrote {len(dataset)} episodes ({dataset.n_transitions} transitions) "
          f"to {out}")
    print(f"certified gaps: structured-only "
          f"{mdp.oracle['gap_structured_only']:.4f}, "
          f"note-only {mdp.oracle['gap_note_only']:.4f}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    dataset, gt = _load_bundle(args.data, cfg)
    splits = {name: len(dataset.split_episodes(name))
              for name in ("train", "val", "test")}
    print(f"episodes: {len(dataset)}  transitions: {dataset.n_transitions}")
    print(f"features: {dataset.n_features}  d_n: {dataset.d_n}")
    print(f"splits: {splits}")
    print(f"ground truth: {'attached' if gt else 'absent'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    out = _out_dir(args, "train")
    dataset, _ = _load_bundle(args.data, cfg)
    enc_cfg = _encoder_config(cfg, dataset)
    train_cfg = _train_config(cfg, seed)
    result = tr_mod.train(dataset, train_cfg, enc_cfg, modality=cfg["modality"])
    result.policy.save(out / "checkpoint.json")
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _write_provenance(out, cfg, seed)
    print(f"trained {cfg['train']['algorithm']} ({cfg['modality']}) for "
          f"{train_cfg.total_steps} steps; final loss "
          f"{result.log[-1]['loss']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def _ope_report_for(cfg: dict, dataset, policy, seed: int, episodes):
    behavior = _behavior_model(cfg, dataset, seed)
    target = ope_mod.soften(policy, cfg["ope"]["eps_soft"])
    return ope_mod.evaluate_policy(dataset, target, behavior,
                                   _ope_config(cfg, seed), episodes=episodes)


def _write_ope_outputs(out: Path, report, variant: str) -> None:
    _write_json(out / "ope_report.json", report.to_dict())
    lines = [f"metric,{variant}"]
    for metric in ("opera", "dr", "fqe", "wis"):
        lines.append(f"{metric},{getattr(report, metric)!r}")
    (out / "ope_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_bdesr_outputs(out: Path, report: dict, variant: str) -> None:
    _write_json(out / "bdesr_report.json", report)
    lines = [f"cohort,{variant}",
             f"low_bdesr,{report['low_bdesr']!r}",
             f"high_bdesr,{report['high_bdesr']!r}"]
    (out / "bdesr_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_residuals(out: Path, policy, dataset, gamma: float) -> None:
    res = tr_mod.bellman_residuals(policy, dataset, gamma)
    _write_json(out / "residuals.json", {
        "mean": res.mean, "std": res.std, "n": int(res.samples.size),
        "hist_counts": res.hist_counts.tolist(),
        "hist_edges": res.hist_edges.tolist(),
    })


def cmd_eval(args, ope_only: bool = False, bdesr_only: bool = False) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    out = _out_dir(args, "eval")
    dataset, _ = _load_bundle(args.data, cfg)
    policy = tr_mod.LearnedPolicy.load(args.checkpoint)
    episodes = _eval_split(dataset)
    if not bdesr_only:
        report = _ope_report_for(cfg, dataset, policy, seed, episodes)
        _write_ope_outputs(out, report, variant="policy")
        _write_residuals(out, policy, dataset, cfg["ope"]["gamma"])
        print(f"OPE: opera={report.opera:.4f} dr={report.dr:.4f} "
              f"fqe={report.fqe:.4f} wis={report.wis:.4f} "
              f"(n={report.n_episodes}, fqe={report.fqe_mode})")
    if not ope_only:
        b = cfg["bdesr"]
        report_b = bdesr_mod.bdesr_report(dataset, policy, alpha=b["alpha"],
                                          beta=b["beta"], p=b["p"],
                                          episodes=episodes)
        _write_bdesr_outputs(out, report_b, variant="policy")
        print(f"BDESR: low={report_b['low_bdesr']:.4f} "
              f"high={report_b['high_bdesr']:.4f} (p={b['p']})")
    _write_provenance(out, cfg, seed)
    return EXIT_OK


def _ablation_variants(cfg: dict):
    """(section, variant name, overrides) for the three sweeps."""
    variants = [
        ("components", "base",
         {"algorithm": "bcq", "strategy": "impute", "use_attention": False}),
        ("components", "+attention",
         {"algorithm": "bcq", "strategy": "impute", "use_attention": True}),
        ("components", "+attention+gate",
         {"algorithm": "bcq", "strategy": "context", "use_attention": True}),
    ]
    for kind in cfg["ablate"]["strategies"]:
        variants.append(("strategies", kind, {"strategy": kind}))
    for window in cfg["ablate"]["windows"]:
        variants.append(("windows", f"W={window}",
                         {"strategy": "stack", "window": window}))
    return variants


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, "ablate")
    if args.data:
        dataset, _ = _load_bundle(args.data, cfg)
    else:
        dataset = _synth_dataset(cfg)
    episodes = _eval_split(dataset)
    metrics = ("opera", "dr", "fqe", "wis")
    rows = []
    for section, name, overrides in _ablation_variants(cfg):
        per_seed = {metric: [] for metric in metrics}
        for seed in cfg["seeds"]:
            enc_cfg = _encoder_config(cfg, dataset,
                                      strategy=overrides.get("strategy"),
                                      window=overrides.get("window"),
                                      use_attention=overrides.get("use_attention"))
            train_cfg = _train_config(cfg, seed,
                                      algorithm=overrides.get("algorithm"))
            result = tr_mod.train(dataset, train_cfg, enc_cfg,
                                  modality=cfg["modality"])
            report = _ope_report_for(cfg, dataset, result.policy, seed, episodes)
            for metric in metrics:
                per_seed[metric].append(getattr(report, metric))
        rows.append({
            "section": section, "variant": name,
            "metrics": {metric: {"mean": float(np.mean(per_seed[metric])),
                                 "std": float(np.std(per_seed[metric]))}
                        for metric in metrics},
        })
    _write_json(out / "ablation.json", {"seeds": cfg["seeds"], "rows": rows})
    lines = ["section,variant," + ",".join(
        f"{m}_mean,{m}_std" for m in metrics)]
    for row in rows:
        cells = [row["section"], row["variant"]]
        for metric in metrics:
            cells.append(repr(row["metrics"][metric]["mean"]))
            cells.append(repr(row["metrics"][metric]["std"]))
        lines.append(",".join(cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_provenance(out, cfg, cfg["seed"])
    print(f"wrote {len(rows)} ablation rows over seeds {cfg['seeds']} to {out}")
    return EXIT_OK


def _synth_dataset(cfg: dict) -> ds_mod.OfflineDataset:
    s = cfg["dataset"]["synth"]
    mdp = gym_mod.generate_mdp(_generator_config(cfg), seed=s["seed"])
    behavior = gym_mod.near_clinician_behavior(mdp, s["behavior_epsilon"])
    dataset = gym_mod.rollout(mdp, behavior, n_episodes=s["n_episodes"],
                              max_len=s["max_len"], seed=s["seed"],
                              split_fractions=tuple(s["split_fractions"]))
    if cfg["dataset"]["normalize"]:
        dataset = ds_mod.normalize(dataset)
    return dataset


def cmd_cross_eval(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    out = _out_dir(args, "cross_eval")
    train_ds_raw = ds_mod.ingest(Path(args.train_data) / "structured.csv",
                                 Path(args.train_data) / "notes.jsonl",
                                 Path(args.train_data) / "manifest.json")
    gt_path = Path(args.train_data) / "ground_truth.json"
    if gt_path.exists():
        train_ds_raw = gym_mod.attach_ground_truth(
            train_ds_raw, gym_mod.load_ground_truth(gt_path))
    eval_ds_raw = ds_mod.ingest(Path(args.eval_data) / "structured.csv",
                                Path(args.eval_data) / "notes.jsonl",
                                Path(args.eval_data) / "manifest.json")
    eval_gt_path = Path(args.eval_data) / "ground_truth.json"
    if eval_gt_path.exists():
        eval_ds_raw = gym_mod.attach_ground_truth(
            eval_ds_raw, gym_mod.load_ground_truth(eval_gt_path))
    if cfg["dataset"]["share_bins"]:
        eval_ds_raw = ds_mod.rediscretize(eval_ds_raw, train_ds_raw.bin_edges)
    if cfg["dataset"]["normalize"]:
        train_ds = ds_mod.normalize(train_ds_raw)
        # evaluation cohort is scaled with the training cohort's statistics
        eval_ds = ds_mod.normalize(eval_ds_raw, stats=train_ds.feature_stats)
    else:
        train_ds, eval_ds = train_ds_raw, eval_ds_raw

    enc_cfg = _encoder_config(cfg, train_ds)
    train_cfg = _train_config(cfg, seed)
    n_points = max(cfg["cross_eval"]["snapshot_points"], 1)
    snapshot_interval = max(train_cfg.total_steps // n_points, 1)
    result = tr_mod.train(train_ds, train_cfg, enc_cfg,
                          modality=cfg["modality"],
                          snapshot_interval=snapshot_interval)
    result.policy.save(out / "checkpoint.json")

    episodes = _eval_split(eval_ds)
    report = _ope_report_for(cfg, eval_ds, result.policy, seed, episodes)
    _write_ope_outputs(out, report, variant="cross")
    _write_residuals(out, result.policy, eval_ds, cfg["ope"]["gamma"])

    # DR across training iterations on the evaluation cohort
    behavior = _behavior_model(cfg, eval_ds, seed)
    curve_lines = ["step,dr"]
    from .netcore import load_param_values
    for step, values in result.snapshots:
        load_param_values(result.policy.all_params(),
                          {k: v for k, v in values.items()
                           if k in result.policy.all_params()})
        target = ope_mod.soften(result.policy, cfg["ope"]["eps_soft"])
        fqe_res = ope_mod.fqe_network(eval_ds, target, cfg["ope"]["gamma"],
                                      _ope_config(cfg, seed).fqe,
                                      episodes=episodes)
        point = ope_mod.dr(eval_ds, target, behavior, fqe_res.q_model,
                           cfg["ope"]["gamma"], episodes=episodes)
        curve_lines.append(f"{step},{point!r}")
    (out / "dr_curve.csv").write_text("\n".join(curve_lines) + "\n",
                                      encoding="utf-8")
    _write_provenance(out, cfg, seed)
    print(f"cross-eval: opera={report.opera:.4f} dr={report.dr:.4f} "
          f"fqe={report.fqe:.4f} wis={report.wis:.4f}")
    print(f"dr curve: {out / 'dr_curve.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise ds_mod.DatasetError(f"run directory not found: {run_dir}")
    ope_files = sorted(run_dir.rglob("ope_report.json"))
    variants = {}
    for path in ope_files:
        rel = path.parent.relative_to(run_dir)
        name = str(rel) if str(rel) != "." else "policy"
        variants[name] = json.loads(path.read_text(encoding="utf-8"))["estimates"]
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    if variants:
        names = sorted(variants)
        lines = ["metric," + ",".join(names)]
        for metric in ("opera", "dr", "fqe", "wis"):
            cells = [repr(variants[n][metric]) for n in names]
            lines.append(f"{metric}," + ",".join(cells))
        (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_json(out / "radar.json",
                    {name: {m: variants[name][m]
                            for m in ("opera", "dr", "fqe", "wis")}
                     for name in names})
    hist_rows = ["variant,bin_left,bin_right,count"]
    for path in sorted(run_dir.rglob("residuals.json")):
        rel = path.parent.relative_to(run_dir)
        name = str(rel) if str(rel) != "." else "policy"
        payload = json.loads(path.read_text(encoding="utf-8"))
        edges = payload["hist_edges"]
        for left, right, count in zip(edges[:-1], edges[1:],
                                      payload["hist_counts"]):
            hist_rows.append(f"{name},{left!r},{right!r},{count}")
    if len(hist_rows) > 1:
        (out / "residual_hist.csv").write_text("\n".join(hist_rows) + "\n",
                                               encoding="utf-8")
    print(f"report written to {out} ({len(variants)} variant(s))")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="careql",
        description="Offline multimodal Q-learning: synthetic data, training, "
                    "off-policy evaluation, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${ENV_OUT_ROOT}/{name})")
        for flag, required in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag,
                           required=required)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth)
    add("ingest", cmd_ingest, data=True)
    add("train", cmd_train, data=True)
    add("eval", cmd_eval, data=True, checkpoint=True)
    add("ope", lambda a: cmd_eval(a, ope_only=True), data=True, checkpoint=True)
    add("bdesr", lambda a: cmd_eval(a, bdesr_only=True), data=True,
        checkpoint=True)
    ablate_p = add("ablate", cmd_ablate)
    ablate_p.add_argument("--data", default=None)
    add("cross-eval", cmd_cross_eval, train_data=True, eval_data=True)
    report_p = sub.add_parser("report")
    report_p.add_argument("--run-dir", dest="run_dir", required=True)
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, gym_mod.GeneratorError, tr_mod.TrainerError,
            ds_mod.DatasetError, ope_mod.OpeError, bdesr_mod.BdesrError,
            tr_mod.TrainingDiverged, NonFiniteGradientError) as exc:
        kind, code = _classify(exc)
        print(f"{kind}: {exc}", file=sys.stderr)
        return code


def _classify(exc: Exception) -> tuple[str, int]:
    if isinstance(exc, (ConfigError, gym_mod.GeneratorError, tr_mod.TrainerError)):
        return "configuration error", EXIT_CONFIG
    if isinstance(exc, ds_mod.DatasetError):
        return "data error", EXIT_DATA
    return "numeric failure", EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
