"""Command-line entry point: ``rmih <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import net, pipeline
from .data import (Bag, SyntheticSpec, generate_synthetic, inject_label_noise, load_bags,
                   save_bags, split)
from .losses import LossWeights, tradeoff_weights
from .retrieval import build_index, evaluate, load_index, query_topk, save_index
from .trainer import (TrainConfig, gradient_check, init_model, kink_margin,
                      save_training_checkpoint, train, write_log)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rmih")


class UsageError(Exception):
    pass


def write_manifest(path, command: str, config: dict, artifacts: list, seed=None,
                   fingerprint: str | None = None, timings: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "dataset_fingerprint": fingerprint,
        "artifacts": [str(a) for a in artifacts],
        "timings_s": timings or {},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(path):
    try:
        return load_bags(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None
    except ValueError as e:
        raise UsageError(str(e)) from None


def resolve_config(args) -> TrainConfig:
    """Defaults, overridden by ``--config`` file, overridden by explicit flags."""
    values = TrainConfig().to_dict()
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None


def add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--epochs", dest="t_max", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lam-q", type=float)
    p.add_argument("--lam-w", type=float)
    p.add_argument("--pool", choices=net.POOL_MODES)
    p.add_argument("--robust", choices=("huber", "l2"))
    p.add_argument("--tradeoff", choices=("decay", "equal", "no_si"))
    p.add_argument("--seed", type=int)
    p.add_argument("--bits", dest="K", type=int)
    p.add_argument("--hidden-dims", type=lambda s: tuple(int(x) for x in s.split(",") if x))
    p.add_argument("--dz", type=int)
    p.add_argument("--fcl-activation", choices=net.FCL_ACTIVATIONS)
    p.add_argument("--scale-refresh", choices=("batch", "epoch"))
    p.add_argument("--quant-norm", choices=("pairs_bits", "pairs", "sum"))
    p.add_argument("--checkpoint-every", type=int)


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    spec = SyntheticSpec(args.classes, args.bags_per_class, args.dim, args.min_size, args.max_size,
                         args.witness_rate, args.background_spread, args.witness_spread,
                         args.separation)
    try:
        ds = generate_synthetic(np.random.default_rng(args.seed), spec)
    except ValueError as e:
        raise UsageError(str(e)) from None
    artifacts = []
    if args.test_out:
        train_ds, test_ds = split(ds, np.random.default_rng([args.seed, 1]), args.train_fraction)
        save_bags(test_ds, args.test_out)
        artifacts.append(args.test_out)
        ds = train_ds
    if args.noise:
        ds = inject_label_noise(ds, np.random.default_rng([args.seed, 2]), args.noise)
    save_bags(ds, args.out)
    artifacts.insert(0, args.out)
    manifest = args.manifest or f"{args.out}.manifest.json"
    cfg = asdict(spec) | {"noise": args.noise, "train_fraction": args.train_fraction if args.test_out else None}
    write_manifest(manifest, "gen-data", cfg, artifacts, args.seed, ds.fingerprint(),
                   {"total": time.perf_counter() - t0})
    print(f"wrote {len(ds)} bags to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = _load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_dir = str(out)
    params = init_model(cfg, ds.d)
    velocity = params.zeros_like()
    t0 = time.perf_counter()
    params, records = train(ds, cfg, params, velocity)
    elapsed = time.perf_counter() - t0
    final = out / "model.ckpt"
    save_training_checkpoint(final, params, velocity, cfg, cfg.t_max)
    write_log(records, out / "trainlog.csv")
    artifacts = [final, out / "trainlog.csv"]
    artifacts += sorted(out.glob("ckpt-epoch-*"), key=lambda p: int(p.name.rsplit("-", 1)[1]))
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), artifacts, cfg.seed,
                   ds.fingerprint(), {"train": elapsed})
    if records:
        last = records[-1]
        print(f"epoch {last['epoch']}: J={last['J']:.6f} J_mi={last['J_mi']:.6f} "
              f"quant_error={last['quant_error']:.4f}")
    print(f"checkpoint: {final}")
    return EXIT_OK


def gradcheck_batch(seed: int, attempt: int = 0):
    """The small random problem used by ``gradcheck``: 6 bags of 1-4 instances, d=5."""
    r = np.random.default_rng([seed, attempt])
    params = net.init_params(r, 5, (8,), 6, 8)
    sizes = r.integers(1, 5, size=6)
    bags = [Bag(f"g{i}", r.standard_normal((int(n), 5)), i % 3) for i, n in enumerate(sizes)]
    return params, bags


def run_gradcheck(seed: int, pool: str, robust: str, eps: float, tol: float,
                  corrupt: bool = False, t: int = 2, t_max: int = 10, max_attempts: int = 50):
    """Check one random problem, redrawn until it sits at least ``10 * eps`` from any kink."""
    cfg = TrainConfig(pool=pool, robust=robust, K=8, hidden_dims=(8,), dz=6)
    lam_mi, lam_si = tradeoff_weights("decay", t, t_max)
    weights = LossWeights(lam_mi, lam_si, 0.05, 0.001, t, t_max)
    for attempt in range(max_attempts):
        params, bags = gradcheck_batch(seed, attempt)
        if kink_margin(params, bags, cfg, weights) > 10 * eps:
            break
    return gradient_check(params, bags, cfg, weights, eps, tol, corrupt)


def cmd_gradcheck(args) -> int:
    pools = net.POOL_MODES if args.pool == "both" else (args.pool,)
    robusts = ("huber", "l2") if args.robust == "both" else (args.robust,)
    ok = True
    for seed in range(args.seed, args.seed + args.seeds):
        for pool in pools:
            for robust in robusts:
                rep = run_gradcheck(seed, pool, robust, args.eps, args.tol, args.corrupt)
                status = "PASS" if rep.passed else "FAIL"
                print(f"seed={seed} pool={pool} robust={robust} max_rel_error={rep.max_rel_error:.3e} {status}")
                for name, err in rep.per_block.items():
                    print(f"  {name:16s} {err:.3e}")
                if not rep.passed:
                    ok = False
                    print(f"  worst coordinate: {rep.worst_block}{list(rep.worst_index)}")
    return EXIT_OK if ok else EXIT_FAIL


def _load_model(path):
    try:
        params, pool, _ = net.load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    return params, pool


def cmd_index(args) -> int:
    params, pool = _load_model(args.checkpoint)
    ds = _load_dataset(args.data)
    idx = pipeline.index_dataset(params, ds, pool, args.mode)
    save_index(idx, args.out)
    print(f"indexed {len(idx)} bags ({args.mode}, K={idx.K}) -> {args.out}")
    return EXIT_OK


def _open_index(path, params):
    try:
        idx = load_index(path)
    except FileNotFoundError:
        raise UsageError(f"index not found: {path}") from None
    if idx.K != params.K:
        raise UsageError(f"checkpoint has K={params.K} but index has K={idx.K}")
    return idx


def cmd_query(args) -> int:
    params, pool = _load_model(args.checkpoint)
    idx = _open_index(args.index, params)
    ds = _load_dataset(args.data)
    queries = pipeline.index_dataset(params, ds, pool, idx.mode)
    wanted = range(len(queries)) if args.id is None else [queries.ids.index(args.id)] \
        if args.id in queries.ids else None
    if wanted is None:
        raise UsageError(f"bag id {args.id!r} not found in {args.data}")
    for i in wanted:
        exclude = None if args.include_self else queries.ids[i]
        res = query_topk(idx, queries.codes_of(i), args.k, exclude_id=exclude)
        for rank, (bag_id, dist) in enumerate(res, start=1):
            print(f"{queries.ids[i]}\t{rank}\t{bag_id}\t{dist:g}")
    return EXIT_OK


def parse_groups(text: str) -> dict:
    try:
        pairs = (item.split(":") for item in text.split(",") if item)
        return {int(a): int(b) for a, b in pairs}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LABEL:GROUP pairs, got {text!r}") from None


def cmd_eval(args) -> int:
    params, pool = _load_model(args.checkpoint)
    idx = _open_index(args.index, params)
    ds = _load_dataset(args.queries)
    queries = pipeline.index_dataset(params, ds, pool, idx.mode)
    rep = evaluate(idx, queries, args.relevance_groups)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pr.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in rep.pr_points:
            w.writerow([f"{r:.2f}", repr(p)])
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["nnca", repr(rep.nnca)])
        w.writerow(["map", repr(rep.map)])
        w.writerow(["queries", len(queries)])
    write_manifest(out / "manifest.json", "eval", {"index": args.index, "queries": args.queries,
                                                   "checkpoint": args.checkpoint,
                                                   "relevance_groups": args.relevance_groups},
                   [out / "pr.csv", out / "report.csv"], None, ds.fingerprint(),
                   {f"latency_ms_{k}": v for k, v in rep.latency_ms.items()})
    print(f"nnCA={rep.nnca:.4f} mAP={rep.map:.4f} latency p50={rep.latency_ms['p50']:.3f}ms")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    ds = _load_dataset(args.data)
    if args.test:
        train_ds, test_ds = ds, _load_dataset(args.test)
    else:
        train_ds, test_ds = split(ds, np.random.default_rng(args.split_seed), args.train_fraction)
    names = args.variants.split(",") if args.variants else list(pipeline.VARIANTS)
    unknown = [n for n in names if n not in pipeline.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(pipeline.VARIANTS)}")
    seeds = list(range(base.seed, base.seed + args.seeds))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows, runs, timings = [], [], {}
    for name in names:
        v = pipeline.VARIANTS[name]
        scores = []
        for seed in seeds:
            t0 = time.perf_counter()
            scores.append(pipeline.run_variant(train_ds, test_ds, base, v, seed))
            timings[f"{name}/seed{seed}"] = time.perf_counter() - t0
            runs.append({"variant": name, "seed": seed,
                         "config": pipeline.variant_config(base, v, seed).to_dict()})
            log.info("%s seed %d nnCA %.4f", name, seed, scores[-1])
        rows.append([name, v.robust, v.tradeoff, v.pool,
                     base.lam_q if v.lam_q is None else v.lam_q, int(v.binarized),
                     repr(float(np.median(scores))), " ".join(repr(s) for s in scores)])
        print(f"{name:12s} median nnCA {np.median(scores):.4f}")
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", "robust", "tradeoff", "pool", "lam_q", "binarized",
                    "median_nnca", "nnca_per_seed"])
        w.writerows(rows)
    write_manifest(args.manifest or f"{out}.manifest.json", "ablate",
                   {"base": base.to_dict(), "variants": names, "seeds": seeds, "runs": runs},
                   [out], base.seed, train_ds.fingerprint(), timings)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmih", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--bags-per-class", type=int, default=50)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--min-size", type=int, default=2)
    p.add_argument("--max-size", type=int, default=6)
    p.add_argument("--witness-rate", type=float, default=0.5)
    p.add_argument("--background-spread", type=float, default=1.0)
    p.add_argument("--witness-spread", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.0, help="label-noise rate on the written bags")
    p.add_argument("--test-out", help="also write a held-out split here")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a bag file")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--pool", choices=("max", "mean", "both"), default="both")
    p.add_argument("--robust", choices=("huber", "l2", "both"), default="both")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("index", help="hash a bag file into a retrieval index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("bag_code", "instance_codes"), default="bag_code")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k retrieval for bags of a file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", help="query only this bag id")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--include-self", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="nnCA, mAP and PR curve of queries against an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--relevance-groups", type=parse_groups, metavar="LABEL:GROUP,...",
                   help="merge labels for PR relevance; default is strict label match")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="median nnCA over the ablation variant grid")
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="held-out bag file; otherwise --data is split")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(pipeline.VARIANTS))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"rmih {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
