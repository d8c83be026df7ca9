"""``fmx`` command line.

Every subcommand reads a YAML config of flat dotted keys (nested mappings are
flattened), applies ``--key value`` overrides, and writes the resolved config
as ``<out_dir>/<command>_config.json`` next to its outputs.

Exit codes: 0 success, 2 config error, 3 data or format error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import diagnostics, judge, probing, synth_data
from .errors import ConfigError, DataError, FmxError
from .model import (
    SparsifyMode,
    canonical_variant,
    param_count,
    select_cp_rank,
    select_tr_ranks,
    weight_count,
)
from .training import TrainConfig, config_dict, init_model, rng_streams, train

log = logging.getLogger("fmx")

COMMANDS = ("generate", "train", "eval", "coherence", "probe", "sweep", "judge", "ranks")

DEFAULTS = {
    "seed": 0,
    "out_dir": "fmx_out",
    "paths.cache": None,
    "paths.checkpoint": None,
    "data.d": 32,
    "data.L": 8,
    "data.n_single": 32,
    "data.n_cross": 32,
    "data.cross_width": 4,
    "data.tokens": 20000,
    "data.firing_prob": 0.05,
    "data.noise_sigma": 0.0,
    "data.policy": "shared",
    "data.labels": False,
    "data.concept_feature": 0,
    "model.variant": "tr",
    "model.d_sae": 256,
    "model.k": 4,
    "model.ranks": None,
    "model.rank_rule": "budget",
    "model.param_budget": None,
    "train.learning_rate": 3e-4,
    "train.steps": 1000,
    "train.batch_size": 256,
    "train.mask_p": 0.0,
    "train.grad_clip_norm": 1.0,
    "train.eval_every": 50,
    "train.epochs": None,
    "eval.mode": "batch_topk",
    "eval.chunk_size": 4096,
    "probe.train_fraction": 0.5,
    "probe.task": "concept",
    "sweep.p": [0.0, 0.1],
    "sweep.reductions": [1, 0.5, 0.25, 0.125],
    "judge.base_url": None,
    "judge.model": None,
    "judge.api_key_env": "FMX_JUDGE_API_KEY",
    "judge.requests_per_second": 2.0,
    "judge.max_in_flight": 4,
    "judge.max_retries": 3,
    "judge.evidence": None,
}


# --- config -------------------------------------------------------------------------


def _flatten(tree, prefix=""):
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _set(cfg, key, value, source):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r} (from {source})")
    cfg[key] = value


def resolve_config(config_path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {config_path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config_path} must be a mapping")
        for key, value in _flatten(loaded).items():
            _set(cfg, key, value, config_path)
    for key, raw in overrides:
        _set(cfg, key, yaml.safe_load(raw) if isinstance(raw, str) else raw, "command line")
    out = Path(str(cfg["out_dir"]))
    if cfg["paths.cache"] is None:
        cfg["paths.cache"] = str(out / "acts.fmxa")
    if cfg["paths.checkpoint"] is None:
        cfg["paths.checkpoint"] = str(out / "model.fmxc")
    return cfg


def _parse_overrides(rest):
    pairs = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"override --{key} needs a value")
            value = rest[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def _typed(cfg, key, kind):
    value = cfg[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be {kind.__name__}, got {value!r}") from None


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None


# --- building blocks ------------------------------------------------------------------


def _variant(cfg):
    try:
        return canonical_variant(cfg["model.variant"])
    except ConfigError as exc:
        raise ConfigError(f"model.variant: {exc}") from None


def _mode(cfg):
    try:
        return SparsifyMode.parse(cfg["eval.mode"])
    except ConfigError as exc:
        raise ConfigError(f"eval.mode: {exc}") from None


def model_ranks(cfg, d, L, reduction=1.0):
    """Ranks for the configured variant at ``reduction`` times the base budget."""
    variant = _variant(cfg)
    d_sae = _typed(cfg, "model.d_sae", int)
    full = cfg["model.param_budget"]
    full = 2 * d * d_sae * L if full is None else _typed(cfg, "model.param_budget", int)
    if not 0 < reduction <= 1:
        raise ConfigError(f"rank reduction must lie in (0, 1], got {reduction}")
    if variant == "dense":
        if reduction != 1:
            raise ConfigError("the dense crosscoder has no rank to reduce")
        return ()
    explicit = cfg["model.ranks"]
    if variant == "tr":
        if explicit is not None and reduction == 1:
            return select_tr_ranks(d, d_sae, L, ranks=explicit)
        return select_tr_ranks(d, d_sae, L, param_budget=full * reduction, rule=cfg["model.rank_rule"])
    if explicit is not None:
        base = int(explicit[0] if isinstance(explicit, (list, tuple)) else explicit)
    else:
        base = select_cp_rank(d, d_sae, L, full)
    r = math.floor(base * reduction)
    if r < 1:
        raise ConfigError(f"CP rank {base} x {reduction} rounds below one")
    return (r,)


def _train_config(cfg, mask_p=None):
    return TrainConfig(
        learning_rate=_typed(cfg, "train.learning_rate", float),
        grad_clip_norm=_typed(cfg, "train.grad_clip_norm", float),
        batch_size=_typed(cfg, "train.batch_size", int),
        steps=_typed(cfg, "train.steps", int),
        mask_p=_typed(cfg, "train.mask_p", float) if mask_p is None else float(mask_p),
        seed=_typed(cfg, "seed", int),
        eval_every=_typed(cfg, "train.eval_every", int),
        epochs=None if cfg["train.epochs"] is None else _typed(cfg, "train.epochs", int),
    )


def _load_cache(path):
    try:
        return synth_data.read_cache(path)
    except OSError as exc:
        raise DataError(f"cannot read activation cache {path}: {exc}") from exc


def _load_checkpoint(path):
    try:
        return ckpt.load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def train_model(cfg, batch, reduction=1.0, mask_p=None, log_path=None):
    T, L, d = batch.dims
    tcfg = _train_config(cfg, mask_p)
    ranks = model_ranks(cfg, d, L, reduction)
    init_rng, _, _ = rng_streams(tcfg.seed)
    model = init_model(
        (d, _typed(cfg, "model.d_sae", int), L),
        _variant(cfg),
        ranks=ranks or None,
        rng=init_rng,
        k=_typed(cfg, "model.k", int),
        mask_p=tcfg.mask_p,
    )
    return train(model, batch, tcfg, log_path=log_path)


def probe_task(batch, cfg):
    if batch.labels is None:
        raise DataError("probing needs a labeled activation cache (generate with --data.labels true)")
    frac = _typed(cfg, "probe.train_fraction", float)
    if not 0 < frac < 1:
        raise ConfigError(f"probe.train_fraction must lie in (0, 1), got {frac}")
    cut = int(round(len(batch) * frac))
    return probing.ProbeTask(str(cfg["probe.task"]), batch.slice(0, cut), batch.slice(cut, len(batch)))


# --- commands ------------------------------------------------------------------------


def cmd_generate(cfg):
    spec_rng, tok_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(_typed(cfg, "seed", int)).spawn(2))
    spec = synth_data.mixed_support_spec(
        _typed(cfg, "data.d", int),
        _typed(cfg, "data.L", int),
        _typed(cfg, "data.n_single", int),
        _typed(cfg, "data.n_cross", int),
        _typed(cfg, "data.cross_width", int),
        rng=spec_rng,
        firing_prob=_typed(cfg, "data.firing_prob", float),
        noise_sigma=_typed(cfg, "data.noise_sigma", float),
        policy=str(cfg["data.policy"]),
        concept_feature=_typed(cfg, "data.concept_feature", int) if _typed(cfg, "data.labels", bool) else None,
    )
    batch, _ = synth_data.generate(spec, _typed(cfg, "data.tokens", int), tok_rng)
    path = Path(cfg["paths.cache"])
    path.parent.mkdir(parents=True, exist_ok=True)
    synth_data.write_cache(batch, path)
    log.info("wrote %d tokens to %s", len(batch), path)
    return {"cache": str(path), "tokens": len(batch)}


def cmd_train(cfg):
    batch = _load_cache(cfg["paths.cache"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model, records = train_model(cfg, batch, log_path=out / "train_log.ndjson")
    ckpt.save_checkpoint(model, cfg["paths.checkpoint"])
    summary = {
        "variant": model.variant,
        "ranks": list(model.ranks),
        "param_count": param_count(model),
        "weight_count": param_count(model, weights_only=True),
        "final_loss": records[-1].get("loss") if records else None,
        "truncated": bool(records and records[-1].get("truncated")),
        "checkpoint": str(cfg["paths.checkpoint"]),
    }
    _write_json(out / "train_summary.json", summary)
    log.info("%s ranks=%s params=%d", model.variant, model.ranks, summary["param_count"])
    return summary


def cmd_eval(cfg):
    model = _load_checkpoint(cfg["paths.checkpoint"])
    batch = _load_cache(cfg["paths.cache"])
    m = diagnostics.recon_metrics(model, batch, _mode(cfg), _typed(cfg, "eval.chunk_size", int))
    row = m.row()
    diagnostics.write_metrics_csv([row], Path(cfg["out_dir"]) / "metrics.csv")
    return row


def cmd_coherence(cfg):
    model = _load_checkpoint(cfg["paths.checkpoint"])
    batch = _load_cache(cfg["paths.cache"])
    rep = diagnostics.coherence_report(model, batch, _mode(cfg), _typed(cfg, "eval.chunk_size", int))
    out = Path(cfg["out_dir"])
    diagnostics.write_coherence_csv(rep, out / "coherence.csv")
    diagnostics.write_histogram_csv(rep, out / "coherence_hist.csv")
    return {
        "mean_c_n": _finite(rep.mean_cn()),
        "mean_c_f": _finite(rep.mean_cf()),
        "defined_c_f": int(rep.defined_cf.sum()),
    }


def cmd_probe(cfg):
    model = _load_checkpoint(cfg["paths.checkpoint"])
    batch = _load_cache(cfg["paths.cache"])
    res = probing.run_probe(model, probe_task(batch, cfg), _mode(cfg), _typed(cfg, "eval.chunk_size", int))
    row = res.row()
    diagnostics.write_metrics_csv([row], Path(cfg["out_dir"]) / "probe.csv")
    print(f"{res.task}\t{res.latent}\t{row['table']}")
    return row


def _cell_name(p, r):
    return f"p{p:g}_r{r:g}"


def cmd_sweep(cfg):
    batch = _load_cache(cfg["paths.cache"])
    ps = [float(p) for p in cfg["sweep.p"]]
    reductions = [float(r) for r in cfg["sweep.reductions"]]
    mode = _mode(cfg)
    chunk = _typed(cfg, "eval.chunk_size", int)
    out = Path(cfg["out_dir"])
    rows = []
    for p in ps:
        for r in reductions:
            cell = out / _cell_name(p, r)
            cell.mkdir(parents=True, exist_ok=True)
            model, _ = train_model(cfg, batch, reduction=r, mask_p=p, log_path=cell / "train_log.ndjson")
            ckpt.save_checkpoint(model, cell / "model.fmxc")
            mse = diagnostics.recon_metrics(model, batch, mode, chunk).mse
            rep = diagnostics.coherence_report(model, batch, mode, chunk)
            f1 = float("nan")
            if batch.labels is not None:
                f1 = probing.run_probe(model, probe_task(batch, cfg), mode, chunk).f1
            row = {
                "p": p,
                "reduction": r,
                "ranks": " ".join(str(x) for x in model.ranks),
                "param_count": param_count(model),
                "mse": mse,
                "mean_f1": f1,
                "mean_c_f": rep.mean_cf(),
            }
            diagnostics.write_metrics_csv([row], cell / "cell.csv")
            rows.append(row)
            log.info("cell %s: %s", cell.name, row)
    diagnostics.write_metrics_csv(rows, out / "sweep.csv")
    return {"cells": len(rows), "table": str(out / "sweep.csv")}


def cmd_ranks(cfg):
    d, L = _typed(cfg, "data.d", int), _typed(cfg, "data.L", int)
    d_sae = _typed(cfg, "model.d_sae", int)
    budget = cfg["model.param_budget"]
    budget = 2 * d * d_sae * L if budget is None else _typed(cfg, "model.param_budget", int)
    tr = select_tr_ranks(d, d_sae, L, param_budget=budget, rule=cfg["model.rank_rule"])
    cp = select_cp_rank(d, d_sae, L, budget)
    print(f"tr {tr[0]} {tr[1]} {tr[2]}  ({2 * weight_count('tr', (d, d_sae, L), tr)} weights)")
    print(f"cp {cp}  ({2 * weight_count('cp', (d, d_sae, L), (cp,))} weights)")
    return {"tr": list(tr), "cp": cp, "budget": budget}


def cmd_judge(cfg, transport=None):
    if not cfg["judge.evidence"]:
        raise ConfigError("judge.evidence must name a JSON file of latent evidence")
    endpoint = judge.EndpointConfig(
        base_url=cfg["judge.base_url"],
        model=cfg["judge.model"],
        api_key_env=str(cfg["judge.api_key_env"]),
        requests_per_second=_typed(cfg, "judge.requests_per_second", float),
        max_in_flight=_typed(cfg, "judge.max_in_flight", int),
        max_retries=_typed(cfg, "judge.max_retries", int),
    )
    try:
        raw = json.loads(Path(cfg["judge.evidence"]).read_text())
        evidence = [judge.LatentEvidence(e["feature_id"], e["tokens"], e.get("contexts", {})) for e in raw]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load judge evidence {cfg['judge.evidence']}: {exc}") from exc
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    run = judge.judge_latents(evidence, endpoint, audit_path=out / "judge.ndjson", transport=transport)
    _write_json(out / "judge_counts.json", run.counts)
    return run.counts


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "coherence": cmd_coherence,
    "probe": cmd_probe,
    "sweep": cmd_sweep,
    "judge": cmd_judge,
    "ranks": cmd_ranks,
}


def run(command, cfg, **kwargs):
    Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
    result = _HANDLERS[command](cfg, **kwargs)
    _write_json(Path(cfg["out_dir"]) / f"{command}_config.json", cfg)
    return result


def main(argv=None, judge_transport=None) -> int:
    parser = argparse.ArgumentParser(prog="fmx", description="Factorized crosscoder toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="YAML file of dotted keys")
    parser.add_argument("-q", "--quiet", action="store_true")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _parse_overrides(rest))
        kwargs = {"transport": judge_transport} if args.command == "judge" else {}
        result = run(args.command, cfg, **kwargs)
    except FmxError as exc:
        print(f"fmx {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fmx {args.command}: I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"fmx {args.command}: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
