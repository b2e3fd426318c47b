"""Command line entry point: ``omnimoe <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out`` and exits 0. Any
failure prints one line ``error: <Kind>: <message>`` to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MOE_KINDS, RunConfig
from .ecphory import cosine_topk, load_bank, save_bank
from .encoder import load_checkpoint, save_checkpoint
from .experiments import (
    ABLATION_FIELDS,
    SUMMARY_FIELDS,
    SWEEP_FIELDS,
    TRACE_FIELDS,
    ablate,
    ecphory_config,
    evaluate_both,
    sweep_experts,
    training_bank,
    weight_rows,
    write_csv,
)
from .gradcheck import run_suite, summarize
from .synth import generate_world, load_world, sample, save_world, split, train_test_sets, write_manifest
from .train import train



class _Parser(argparse.ArgumentParser):
    """Usage errors also come out as a single ``error:`` line."""

    def error(self, message):
        self.exit(2, f"error: UsageError: {' '.join(message.split())}\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "variant", None):
        changes["moe_kind"] = args.variant
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _world(args, cfg: RunConfig):
    if getattr(args, "world", None):
        world = load_world(args.world)
        if world.cfg.seed != cfg.seed and args.seed is not None:
            raise ValueError(f"--seed {cfg.seed} disagrees with world file seed {world.cfg.seed}")
        return world
    return generate_world(cfg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = _out(args)
    world = generate_world(cfg)
    save_world(world, out / "world.synw")
    write_manifest(world, out / "manifest.csv")
    cfg.save(out / "config.txt")
    print(f"world: {len(world.subjects)} subjects, {world.n_stimuli} stimuli -> {out / 'world.synw'}")


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out(args)
    world = _world(args, cfg)
    cfg = cfg.replace(n_subjects=world.cfg.n_subjects)
    train_set, _ = train_test_sets(world)
    result = train(cfg, train_set)
    save_checkpoint(result.model, out / "checkpoint.psym")
    write_csv(out / "history.csv", ("epoch", "train_loss"), result.history)
    cfg.save(out / "config.txt")
    print(f"trained {cfg.moe_kind}: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")


def _load_model(args, cfg: RunConfig):
    expected = cfg if args.config or getattr(args, "variant", None) else None
    return load_checkpoint(args.checkpoint, expected)


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = _out(args)
    model = _load_model(args, cfg)
    run_cfg = model.cfg.replace(seed=cfg.seed) if args.seed is not None else model.cfg
    world = _world(args, run_cfg)
    _, test_set = train_test_sets(world)
    bank = load_bank(args.bank) if args.bank else training_bank(world)
    plain, enhanced = evaluate_both(run_cfg, model, test_set, bank)
    chosen = enhanced if args.use_ecphory else plain
    row = {"ecphory": args.use_ecphory, **chosen.as_dict()}
    write_csv(out / "metrics.csv", list(row), [row])
    print(f"two_way {chosen.two_way:.2f} topk_retrieval {chosen.topk_retrieval:.2f} ecphory {args.use_ecphory}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = ablate(cfg, seeds=seeds, epochs=args.epochs)
    write_csv(out / "ablation.csv", ABLATION_FIELDS, result.rows)
    write_csv(out / "ablation_summary.csv", SUMMARY_FIELDS, result.summary_rows())
    for row in result.summary_rows():
        print(f"#{row['variant']} {row['label']}: two_way {row['two_way_mean']:.2f} +- {row['two_way_std']:.2f}")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    out = _out(args)
    counts = [int(s) for s in args.experts.split(",")] if args.experts else None
    rows = sweep_experts(cfg, counts, epochs=args.epochs)
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    for r in rows:
        print(f"{r['variant']} E={r['n_experts']}: two_way {r['two_way']:.2f} applications {r['expert_application_count']}")


def cmd_gradcheck(args) -> None:
    out = _out(args)
    variants = args.variants.split(",") if args.variants else None
    results = run_suite(args.seed or 0, variants)
    rows = [dict(zip(("variant", "parameter", "max_rel_err", "passed"), r)) for r in summarize(results)]
    write_csv(out / "gradcheck.csv", ("variant", "parameter", "max_rel_err", "passed"), rows)
    for name, res in results.items():
        print(f"{name}: max_rel_err {res.max_rel_err:.3e} {'pass' if res.passed else 'FAIL'}")
    failed = [name for name, res in results.items() if not res.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for {','.join(failed)}")


def cmd_dump_weights(args) -> None:
    cfg = _config(args)
    out = _out(args)
    model = _load_model(args, cfg)
    world = _world(args, model.cfg)
    _, test_set = train_test_sets(world)
    rows = weight_rows(model, test_set, args.block)
    write_csv(out / "weights.csv", TRACE_FIELDS, rows)
    print(f"{len(rows)} rows -> {out / 'weights.csv'}")


def cmd_retrieve(args) -> None:
    cfg = _config(args)
    out = _out(args)
    model = _load_model(args, cfg)
    world = _world(args, model.cfg)
    bank = load_bank(args.bank) if args.bank else training_bank(world)
    if not args.bank:
        save_bank(bank, out / "bank.ecph")
    _, test_ids = split(world)
    stimulus = test_ids[0] if args.stimulus is None else args.stimulus
    subject = world.subjects[0] if args.subject is None else args.subject
    x = sample(world, subject, stimulus, 1000)
    ecfg = ecphory_config(model.cfg)
    k = args.k or ecfg.k
    img, txt = model.predict(x.padded[None], [subject])
    rows = []
    for modality, pred in (("image", img[0]), ("text", txt[0])):
        hits = cosine_topk(pred, bank, subject, modality, k, ecfg)
        for rank, (sid, score) in enumerate(hits):
            rows.append({"modality": modality, "rank": rank, "stimulus": sid, "score": score})
    write_csv(out / "retrieval.csv", ("modality", "rank", "stimulus", "score"), rows)
    for r in rows:
        print(f"{r['modality']} rank {r['rank']}: stimulus {r['stimulus']} score {r['score']:.4f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omnimoe", description="Omni MoE fMRI encoder experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, *, checkpoint=False, variant=False, world=False, epochs=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        if variant:
            p.add_argument("--variant", choices=MOE_KINDS, help="MoE sublayer kind")
        if world:
            p.add_argument("--world", help="world file written by gen-data")
        if epochs:
            p.add_argument("--epochs", type=int, help="override the epoch budget")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate and save a synthetic world")
    add("train", cmd_train, "train an encoder", variant=True, world=True, epochs=True)
    p = add("eval", cmd_eval, "score a checkpoint on the test split", checkpoint=True, variant=True, world=True)
    p.add_argument("--use-ecphory", action="store_true", help="blend predictions with retrieved memories")
    p.add_argument("--bank", help="memory bank file (default: training targets)")
    p = add("ablate", cmd_ablate, "run the four-variant ablation", epochs=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: config ablation_seeds)")
    p = add("sweep-experts", cmd_sweep, "quality and cost against expert count", epochs=True)
    p.add_argument("--experts", help="comma-separated expert counts")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of micro models")
    p.add_argument("--variants", help="comma-separated micro variants (default: all)")
    p = add("dump-weights", cmd_dump_weights, "export split / lump weight sums", checkpoint=True, variant=True, world=True)
    p.add_argument("--block", type=int, help="block index (default: last Omni MoE block)")
    p = add("retrieve", cmd_retrieve, "top-K memory retrieval for one test sample", checkpoint=True, variant=True, world=True)
    p.add_argument("--bank", help="memory bank file (default: training targets, saved to --out)")
    p.add_argument("--subject", type=int)
    p.add_argument("--stimulus", type=int)
    p.add_argument("--k", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
