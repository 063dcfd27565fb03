"""``lla`` command line: synth, lock, run, attack, simulate, flops, eval.

Every subcommand takes ``--config FILE`` (a flat JSON object) whose keys
are the long option names with dashes replaced by underscores; explicit
flags win over the file.  Exit codes: 0 ok, 2 usage/config error, 3
runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, fabric, storage
from .attack import AttackConfig, Oracle, fidelity, genetic_attack, gradient_attack, jsd_logits, source_map
from .errors import ConfigError, LLAError
from .hwsim import SystolicConfig, locked_layer_sim
from .linalg import matmul
from .locker import flop_overhead_report, lock_model
from .model import SynthConfig, model_logits, perplexity, random_probes, run_blocks, sample_corpus, synth_model
from .outlier import DEFAULT_TAU, report_json
from .rng import derive_seed

DEFAULTS = {
    "synth": dict(vocab=64, dm=32, dff=256, blocks=3, outlier_dims="7,13", outlier_block=1, gain=50.0, hot=8,
                  kind="standard", act="relu", seed=0, corpus_count=16, probe_count=8, seq_len=64),
    "lock": dict(tau=DEFAULT_TAU, n=64, m=16, seed=0, block=None, rotate=True, key_out=None),
    "run": dict(key=None, tokens=None, corpus=None, out=None),
    "attack": dict(mode="gradient", guidance="OG", iterations=2000, time_limit=7200.0, seed=0, lr=0.03,
                   population=64, tournament=4, mutation_rate=0.5, crossover_rate=0.9, probes=None, corpus=None,
                   oracle=None, truth_key=None, eval_corpus=None),
    "simulate": dict(key=None, tokens=None, rows=16, cols=16, dataflow="weight_stationary", rounds=1),
    "flops": dict(dm=4096, dff=16384, kind="standard", n=2048, m=16, path="fwht"),
    "eval": dict(key_a=None, key_b=None, tokens=None, corpus=None),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lla", description="Model locking toolkit for transformer FFN blocks.")
    parser.add_argument("--version", action="version", version=f"lla {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        _add(p, "--config", help="JSON file with option defaults")
        _add(p, "--manifest", help="where to write the run manifest")

    p = sub.add_parser("synth", help="build a toy model with planted feature outliers")
    common(p)
    _add(p, "-o", "--out", help="output model directory")
    for name, typ in (("--vocab", int), ("--dm", int), ("--dff", int), ("--blocks", int), ("--outlier-block", int),
                      ("--gain", float), ("--hot", int), ("--seed", int), ("--corpus-count", int),
                      ("--probe-count", int), ("--seq-len", int)):
        _add(p, name, type=typ)
    _add(p, "--outlier-dims", help="comma-separated feature indices")
    _add(p, "--kind", choices=("standard", "gated"))
    _add(p, "--act", choices=("relu", "silu"))

    p = sub.add_parser("lock", help="lock a model and write the key separately")
    common(p)
    _add(p, "--model", help="input model directory")
    _add(p, "-o", "--out", help="output locked-model directory")
    _add(p, "--key-out", help="key file path (default: <out>.llak)")
    _add(p, "--tau", type=float)
    _add(p, "--n", type=int, help="number of protected neurons")
    _add(p, "--m", type=int, help="fabric group size")
    _add(p, "--seed", type=int)
    _add(p, "--block", type=int, help="force the protected block")
    _add(p, "--probes", help="token file for outlier probing")
    p.add_argument("--no-rotate", dest="rotate", action="store_false", default=None,
                   help="skip the Hadamard rotation (ablation)")

    p = sub.add_parser("run", help="run a (locked) model on token sequences")
    common(p)
    _add(p, "model", nargs="?", help="model directory")
    _add(p, "--key", help="LLAK key file (locked models)")
    _add(p, "--tokens", help="token file")
    _add(p, "--corpus", help="token file for perplexity")
    _add(p, "-o", "--out", help="write logits (LLAT) here")

    p = sub.add_parser("attack", help="key-recovery attack on a locked model")
    common(p)
    _add(p, "--model", help="locked model directory")
    _add(p, "--oracle", help="unlocked model directory answering oracle queries")
    _add(p, "--mode", choices=("genetic", "gradient"))
    _add(p, "--guidance", choices=("OG", "OL"))
    _add(p, "--iterations", type=int, help="Adam steps or GA generations")
    _add(p, "--time-limit", type=float, help="wall-clock cap in seconds")
    _add(p, "--seed", type=int)
    _add(p, "--lr", type=float)
    _add(p, "--population", type=int)
    _add(p, "--tournament", type=int)
    _add(p, "--mutation-rate", type=float)
    _add(p, "--crossover-rate", type=float)
    _add(p, "--probes", help="token file for oracle queries")
    _add(p, "--corpus", help="token file for the oracle-less loss")
    _add(p, "--eval-corpus", help="token file for post-attack perplexity")
    _add(p, "--truth-key", help="the real key, only to score fidelity")
    _add(p, "-o", "--out", help="AttackResult JSON path")

    p = sub.add_parser("simulate", help="run the protected layer on the systolic-array simulator")
    common(p)
    _add(p, "--model", help="locked model directory")
    _add(p, "--key", help="LLAK key file")
    _add(p, "--tokens", help="token file; hidden states entering the protected FFN are used")
    _add(p, "--rows", type=int)
    _add(p, "--cols", type=int)
    _add(p, "--dataflow", choices=("weight_stationary", "output_stationary"))
    _add(p, "--rounds", type=int)
    _add(p, "-o", "--out", help="output directory for trace.txt, summary.json, y.llat")

    p = sub.add_parser("flops", help="FLOP overhead of the locking transforms")
    common(p)
    _add(p, "--dm", type=int)
    _add(p, "--dff", type=int)
    _add(p, "--kind", choices=("standard", "gated"))
    _add(p, "--n", type=int)
    _add(p, "--m", type=int)
    _add(p, "--path", choices=("fwht", "dense"))
    _add(p, "-o", "--out", help="report JSON path")

    p = sub.add_parser("eval", help="compare two model runs: JSD, perplexity, fidelity")
    common(p)
    _add(p, "--model-a")
    _add(p, "--model-b")
    _add(p, "--key-a")
    _add(p, "--key-b")
    _add(p, "--tokens", help="token file (default: every vocabulary token)")
    _add(p, "--corpus", help="token file for perplexity")
    _add(p, "-o", "--out", help="report JSON path")
    return parser


def _settings(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in ("command", "config", "manifest") or v is None:
            continue
        cfg[k] = v
    return cfg


def _need(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _model_and_override(directory, key_path):
    if storage.is_locked(directory):
        locked = storage.load_locked_model(directory)
        if key_path:
            key = fabric.load_key(key_path)
        else:
            warnings.warn("no key supplied; the fabric uses the all-zero pass-through pattern")
            key = locked.zero_key()
        return locked.model, locked.ffn_override(key), locked
    if key_path:
        raise ConfigError(f"{directory} is not locked; --key does not apply")
    return storage.load_model(directory), None, None


def _tokens_or_vocab(path, vocab):
    return storage.read_tokens(path) if path else [list(range(vocab))]


def cmd_synth(cfg, outputs):
    _need(cfg, "out")
    dims = tuple(int(v) for v in str(cfg["outlier_dims"]).split(",") if v.strip()) if cfg["outlier_dims"] not in (None, "") else ()
    sc = SynthConfig(vocab=cfg["vocab"], d_model=cfg["dm"], d_ff=cfg["dff"], n_blocks=cfg["blocks"], outlier_dims=dims,
                     outlier_block=cfg["outlier_block"], outlier_gain=cfg["gain"], hot_neurons=cfg["hot"],
                     kind=cfg["kind"], activation=cfg["act"])
    model = synth_model(sc, cfg["seed"])
    out = Path(cfg["out"])
    storage.save_model(model, out)
    storage.write_tokens(random_probes(sc.vocab, derive_seed(cfg["seed"], 20), cfg["probe_count"], cfg["seq_len"]), out / "probes.txt")
    storage.write_tokens(sample_corpus(model, derive_seed(cfg["seed"], 21), cfg["corpus_count"], cfg["seq_len"]), out / "corpus.txt")
    outputs.append(str(out))
    return {"model": str(out), "vocab": sc.vocab, "d_model": sc.d_model, "d_ff": sc.d_ff, "blocks": sc.n_blocks}


def cmd_lock(cfg, outputs):
    _need(cfg, "model", "out")
    out = Path(cfg["out"])
    key_out = Path(cfg["key_out"]) if cfg.get("key_out") else out.parent / (out.name + ".llak")
    if out.resolve() in key_out.resolve().parents:
        raise ConfigError("the key file must not be written inside the locked model directory")
    model = storage.load_model(cfg["model"])
    probes = storage.read_tokens(cfg["probes"]) if cfg.get("probes") else None
    res = lock_model(model, cfg["n"], cfg["m"], cfg["seed"], cfg["tau"], probes, cfg.get("block"), bool(cfg["rotate"]))
    storage.save_locked_model(res.locked, out)
    storage.write_json(report_json(res.outlier_report, res.neuron_scores), out / "lock_report.json")
    fabric.save_key(res.key, key_out)
    outputs += [str(out), str(key_out)]
    return {"locked_model": str(out), "key": str(key_out), "protected_block": res.spec.protected_block,
            "n": res.key.n, "m": res.key.m, "key_bits": res.key.total_bits, "bits_per_neuron": res.key.bits_per_neuron,
            "outliers": res.outlier_report.outliers}


def cmd_run(cfg, outputs):
    _need(cfg, "model")
    model, override, _ = _model_and_override(cfg["model"], cfg.get("key"))
    summary = {"model": cfg["model"]}
    if cfg.get("tokens") or cfg.get("out"):
        seqs = _tokens_or_vocab(cfg.get("tokens"), model.vocab)
        logits = np.concatenate([model_logits(model, s, override) for s in seqs])
        summary["positions"] = int(logits.shape[0])
        if cfg.get("out"):
            storage.save_tensor(logits, cfg["out"])
            outputs.append(cfg["out"])
    if cfg.get("corpus"):
        summary["perplexity"] = perplexity(model, storage.read_tokens(cfg["corpus"]), override)
    return summary


def cmd_attack(cfg, outputs):
    _need(cfg, "model")
    locked = storage.load_locked_model(cfg["model"])
    oracle = Oracle(storage.load_model(cfg["oracle"])) if cfg.get("oracle") else None
    if cfg["guidance"] == "OG" and oracle is None:
        raise ConfigError("an OG attack needs --oracle")
    probes = storage.read_tokens(cfg["probes"]) if cfg.get("probes") else random_probes(locked.model.vocab, derive_seed(cfg["seed"], 30))
    ac = AttackConfig(mode=cfg["mode"], guidance=cfg["guidance"], iterations=cfg["iterations"],
                      time_limit_s=cfg["time_limit"], seed=cfg["seed"], probes=probes,
                      corpus=storage.read_tokens(cfg["corpus"]) if cfg.get("corpus") else None,
                      eval_corpus=storage.read_tokens(cfg["eval_corpus"]) if cfg.get("eval_corpus") else None,
                      population=cfg["population"], tournament=cfg["tournament"], mutation_rate=cfg["mutation_rate"],
                      crossover_rate=cfg["crossover_rate"], lr=cfg["lr"])
    truth = fabric.load_key(cfg["truth_key"]).perm if cfg.get("truth_key") else None
    ref = oracle.query(np.arange(locked.model.vocab)) if oracle else None
    if ref is None:
        raise ConfigError("post-attack JSD needs --oracle")
    fn = gradient_attack if ac.mode == "gradient" else genetic_attack
    result = fn(locked, oracle, ac, truth_perm=truth, reference_logits=ref)
    body = result.to_json(include_timing=False)
    if cfg.get("out"):
        storage.write_json(body, cfg["out"])
        outputs.append(cfg["out"])
    return {k: body[k] for k in ("mode", "guidance", "fidelity", "jsd_before", "jsd_after", "iterations")} | {"elapsed_s": result.elapsed_s}


def cmd_simulate(cfg, outputs):
    _need(cfg, "model", "out")
    locked = storage.load_locked_model(cfg["model"])
    key = fabric.load_key(cfg["key"]) if cfg.get("key") else fabric.key_from_bits(locked.zero_key(), locked.locked.n, locked.locked.m)
    seqs = _tokens_or_vocab(cfg.get("tokens"), locked.model.vocab)
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
    model = locked.model
    b = locked.protected_block
    h = run_blocks(model, model.embed[tokens], 0, b)
    h = h + matmul(h, model.blocks[b].mix)
    sc = SystolicConfig(cfg["rows"], cfg["cols"], cfg["dataflow"], locked.locked.m, cfg["rounds"])
    y, trace = locked_layer_sim(locked.locked, key.bits, h, sc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.txt").write_text(trace.to_text(), encoding="utf-8")
    (out / "summary.json").write_text(trace.summary_json(), encoding="utf-8")
    storage.save_tensor(y, out / "y.llat")
    outputs.append(str(out))
    s = trace.summary()
    return {"cycles": s["cycles"], "macs": s["macs"], "fabric_activations": s["fabric_activations"]}


def cmd_flops(cfg, outputs):
    rep = flop_overhead_report(cfg["dm"], cfg["dff"], cfg["kind"], cfg["n"], cfg["m"], cfg["path"])
    body = rep.to_json()
    body["ratio_percent"] = 100.0 * rep.ratio
    if cfg.get("out"):
        storage.write_json(body, cfg["out"])
        outputs.append(cfg["out"])
    if rep.warning:
        print(f"warning: {rep.warning}", file=sys.stderr)
    return body


def cmd_eval(cfg, outputs):
    _need(cfg, "model_a", "model_b")
    model_a, ov_a, _ = _model_and_override(cfg["model_a"], cfg.get("key_a"))
    model_b, ov_b, _ = _model_and_override(cfg["model_b"], cfg.get("key_b"))
    seqs = _tokens_or_vocab(cfg.get("tokens"), model_a.vocab)
    la = np.concatenate([model_logits(model_a, s, ov_a) for s in seqs])
    lb = np.concatenate([model_logits(model_b, s, ov_b) for s in seqs])
    body = {"jsd": jsd_logits(la, lb)}
    if cfg.get("corpus"):
        corpus = storage.read_tokens(cfg["corpus"])
        body["perplexity_a"] = perplexity(model_a, corpus, ov_a)
        body["perplexity_b"] = perplexity(model_b, corpus, ov_b)
    if cfg.get("key_a") and cfg.get("key_b"):
        ka, kb = fabric.load_key(cfg["key_a"]), fabric.load_key(cfg["key_b"])
        body["fidelity"] = fidelity(source_map(ka.perm), source_map(kb.perm))
    if cfg.get("out"):
        storage.write_json(body, cfg["out"])
        outputs.append(cfg["out"])
    return body


COMMANDS = {"synth": cmd_synth, "lock": cmd_lock, "run": cmd_run, "attack": cmd_attack,
            "simulate": cmd_simulate, "flops": cmd_flops, "eval": cmd_eval}


def _manifest_path(args, cfg, command):
    if args.manifest:
        return Path(args.manifest)
    out = cfg.get("out")
    if not out:
        return None
    out = Path(out)
    return out.parent / (out.name + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 2
        cfg = _settings(args.command, args)
        started = time.time()
        outputs = []
        result = COMMANDS[args.command](cfg, outputs)
    except ConfigError as exc:
        print(f"lla: config error: {exc}", file=sys.stderr)
        return 2
    except (LLAError, OSError, ValueError) as exc:
        print(f"lla: error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    manifest = {
        "command": args.command,
        "config": cfg,
        "seeds": {k: v for k, v in cfg.items() if k == "seed"},
        "outputs": outputs,
        "tool_version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": time.time() - started,
    }
    path = _manifest_path(args, cfg, args.command)
    if path is not None:
        storage.write_json(manifest, path)
    else:
        print(json.dumps(manifest, sort_keys=True, default=str), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
