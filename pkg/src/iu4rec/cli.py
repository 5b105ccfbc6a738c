"""Command-line pipeline: synth | build-iu | featurize | train | eval |
simulate | ab-test | all.

Every command reads its declared inputs from --out (default ./out), writes its
outputs there, and is deterministic given the config. Verbosity comes from the
IU4REC_LOG env var (error | info | debug).
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .features import FeatureContext, FeatureStore, accumulate_iu_stats, featurize, split_by_day
from .marketplace import DAY, World, simulate_log
from .metrics import ScoredSample, domain_split_eval
from .models import ModelConfig, score_samples, train
from .pipeline import (ConfigError, PipelineConfig, config_to_dict,
                       event_from_record, event_to_record, item_from_record,
                       item_to_record, load_checkpoint, load_config,
                       read_jsonl, restore_params, sample_from_record,
                       sample_to_record, save_checkpoint, unit_from_record,
                       unit_to_record, user_from_record, user_to_record,
                       write_jsonl)
from .twostage import MergePolicy, ModelScorer, ServingWorld, run_ab_test, run_sessions
from .units import (build_image_cluster_units, build_item_iu_map,
                    build_semantic_units, build_spu_units, coverage_report,
                    train_gsid_codebooks)

log = logging.getLogger("iu4rec")


class MissingInputError(RuntimeError):
    pass


def _setup_logging():
    level = os.environ.get("IU4REC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"IU4REC_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(message)s")


def _require(out_dir, filename, producer):
    path = os.path.join(out_dir, filename)
    if not os.path.exists(path):
        raise MissingInputError(
            f"missing input {filename}: run `iu4rec {producer}` first")
    return path


def _path(out_dir, filename):
    return os.path.join(out_dir, filename)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_world(cfg, out_dir):
    users = [user_from_record(r) for r in
             read_jsonl(_require(out_dir, "users.jsonl", "synth"), "users")]
    items = [item_from_record(r) for r in
             read_jsonl(_require(out_dir, "catalog.jsonl", "synth"), "catalog")]
    return World(cfg.world, users, items)


def _load_events(out_dir):
    return [event_from_record(r) for r in
            read_jsonl(_require(out_dir, "events.jsonl", "synth"), "events")]


def _load_units(out_dir):
    return [unit_from_record(r) for r in
            read_jsonl(_require(out_dir, "units.jsonl", "build-iu"), "units")]


def _context(cfg, out_dir):
    world = _load_world(cfg, out_dir)
    units = _load_units(out_dir)
    iu_map = build_item_iu_map(world.items, units, tuple(cfg.units.precedence))
    ctx = FeatureContext.build(world.users, world.items, units, iu_map)
    return world, units, iu_map, ctx


def cmd_synth(cfg, out_dir):
    world = World.generate(cfg.world, cfg.world_seed)
    events = simulate_log(world, seed=cfg.log_seed)
    write_jsonl(_path(out_dir, "users.jsonl"),
                (user_to_record(u) for u in world.users), "users")
    write_jsonl(_path(out_dir, "catalog.jsonl"),
                (item_to_record(i) for i in world.items), "catalog")
    write_jsonl(_path(out_dir, "events.jsonl"),
                (event_to_record(e) for e in events), "events")
    log.info("synth: %d users, %d items, %d events",
             len(world.users), len(world.items), len(events))


def cmd_build_iu(cfg, out_dir):
    world = _load_world(cfg, out_dir)
    events = _load_events(out_dir)
    ucfg = cfg.units
    units = build_spu_units(world.items, ucfg.min_members)
    units += build_image_cluster_units(world.items, ucfg.image_k, ucfg.seed,
                                       ucfg.min_members)
    codebooks = train_gsid_codebooks(
        np.stack([i.text_vec for i in world.items]), ucfg.seed + 1)
    units += build_semantic_units(world.items, codebooks, ucfg.semantic_level,
                                  ucfg.min_members)
    write_jsonl(_path(out_dir, "units.jsonl"),
                (unit_to_record(u) for u in units), "units")
    report = coverage_report(units, events, world.items)
    log.info("build-iu coverage:\n%s", json.dumps(report, indent=2, sort_keys=True))


def cmd_featurize(cfg, out_dir):
    world, units, iu_map, ctx = _context(cfg, out_dir)
    events = _load_events(out_dir)
    store = FeatureStore(events, iu_map, ctx, cfg.world.horizon_days)
    samples = featurize(events, store)
    write_jsonl(_path(out_dir, "features.jsonl"),
                (sample_to_record(s) for s in samples), "features")
    for d in range(1, cfg.world.horizon_days + 1):
        stats = accumulate_iu_stats(events, iu_map, as_of_time=d * DAY)
        write_jsonl(_path(out_dir, f"iu_stats_day{d}.jsonl"),
                    ({"iu_id": s.iu_id, "impressions": s.impressions,
                      "clicks": s.clicks, "inquiries": s.inquiries,
                      "transactions": s.transactions}
                     for s in sorted(stats.values(), key=lambda s: s.iu_id)),
                    "iu_stats")
    log.info("featurize: %d samples", len(samples))


def _load_samples(out_dir):
    return [sample_from_record(r) for r in
            read_jsonl(_require(out_dir, "features.jsonl", "featurize"), "features")]


def cmd_train(cfg, out_dir):
    world, units, iu_map, ctx = _context(cfg, out_dir)
    samples = _load_samples(out_dir)
    train_samples, _ = split_by_day(samples, cfg.features.train_days)
    digest = cfg.digest()
    for kind in cfg.model_kinds:
        mcfg = ModelConfig(**{**config_to_dict(cfg.model), "kind": kind,
                              "mlp_widths": tuple(cfg.model.mlp_widths)})
        params, curve = train(kind, train_samples, ctx, mcfg)
        save_checkpoint(_path(out_dir, f"model_{kind}.iu4r"), params, digest)
        curve_path = _path(out_dir, f"loss_curve_{kind}.csv")
        with open(curve_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            w.writerows(curve)
        if kind == cfg.model.kind:
            with open(curve_path) as src, open(_path(out_dir, "loss_curve.csv"), "w") as dst:
                dst.write(src.read())
        log.info("train %s: %d steps, final loss %.4f", kind, len(curve),
                 curve[-1][1])


def _load_model(cfg, out_dir, kind, ctx):
    path = _require(out_dir, f"model_{kind}.iu4r", "train")
    ck_kind, arrays, _ = load_checkpoint(path, cfg.digest())
    mcfg = ModelConfig(**{**config_to_dict(cfg.model), "kind": ck_kind,
                          "mlp_widths": tuple(cfg.model.mlp_widths)})
    return restore_params(ck_kind, arrays, ctx.vocab_sizes, mcfg)


def cmd_eval(cfg, out_dir):
    world, units, iu_map, ctx = _context(cfg, out_dir)
    samples = _load_samples(out_dir)
    _, test = split_by_day(samples, cfg.features.train_days)
    scored_by_model = {}
    dump = []
    for kind in cfg.model_kinds:
        params = _load_model(cfg, out_dir, kind, ctx)
        scores = score_samples(params, test, ctx)
        scored = [ScoredSample(s.user_id, float(p), s.label, s.domain)
                  for s, p in zip(test, scores)]
        scored_by_model[kind] = scored
        dump.extend({"user_id": s.user_id, "score": s.score, "label": s.label,
                     "domain": s.domain} for s in scored_by_model[kind])
    write_jsonl(_path(out_dir, "scored_samples.jsonl"), dump, "scored_samples")
    report = domain_split_eval(scored_by_model, cfg.eval.base_model)
    report["config_digest"] = cfg.digest()
    _write_json(_path(out_dir, "report.json"), report)
    log.info("eval: report.json written (base=%s)", cfg.eval.base_model)


def _serving(cfg, out_dir):
    world, units, iu_map, ctx = _context(cfg, out_dir)
    events = _load_events(out_dir)
    store = FeatureStore(events, iu_map, ctx, cfg.world.horizon_days)
    serving = ServingWorld(world, units, iu_map)
    as_of = cfg.world.horizon_days * DAY
    policy = MergePolicy(iu_slot_ratio=cfg.simulation.iu_slot_ratio,
                         page_size=cfg.simulation.page_size)
    return serving, store, ctx, as_of, policy


def cmd_simulate(cfg, out_dir):
    serving, store, ctx, as_of, policy = _serving(cfg, out_dir)
    params = _load_model(cfg, out_dir, cfg.simulation.model_b, ctx)
    scorer = ModelScorer(params, store, ctx, as_of)
    outcome, events = run_sessions(serving, scorer, policy,
                                   cfg.simulation.horizon_days,
                                   cfg.simulation.seed)
    write_jsonl(_path(out_dir, "sim_events.jsonl"),
                (event_to_record(e) for e in events), "events")
    log.info("simulate: overall %s | iu %s | normal %s",
             outcome.overall.as_dict(), outcome.iu.as_dict(),
             outcome.normal.as_dict())


def cmd_ab_test(cfg, out_dir):
    serving, store, ctx, as_of, policy = _serving(cfg, out_dir)
    params_a = _load_model(cfg, out_dir, cfg.simulation.model_a, ctx)
    params_b = _load_model(cfg, out_dir, cfg.simulation.model_b, ctx)
    scorer_a = ModelScorer(params_a, store, ctx, as_of)
    scorer_b = ModelScorer(params_b, store, ctx, as_of)
    report, _ = run_ab_test(serving, scorer_a, scorer_b,
                            split=cfg.simulation.split,
                            horizon_days=cfg.simulation.horizon_days,
                            seed=cfg.simulation.seed, policy=policy,
                            shared_randomness=cfg.simulation.shared_randomness)
    report["models"] = {"a": cfg.simulation.model_a, "b": cfg.simulation.model_b}
    report["config_digest"] = cfg.digest()
    _write_json(_path(out_dir, "ab_report.json"), report)
    log.info("ab-test: ab_report.json written")


COMMANDS = {
    "synth": cmd_synth,
    "build-iu": cmd_build_iu,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "ab-test": cmd_ab_test,
}
PIPELINE_ORDER = ["synth", "build-iu", "featurize", "train", "eval",
                  "simulate", "ab-test"]


def main(argv=None):
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="iu4rec",
        description="Interest-unit recommendation pipeline (desk scale)")
    parser.add_argument("command", choices=PIPELINE_ORDER + ["all"])
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every pipeline seed from one value")
    parser.add_argument("--out", default="out", help="data directory")
    parser.add_argument("--version", action="version", version=__version__)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.override_seed(args.seed)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "all":
            for name in PIPELINE_ORDER:
                log.info("== %s ==", name)
                COMMANDS[name](cfg, args.out)
        else:
            COMMANDS[args.command](cfg, args.out)
    except (ConfigError, MissingInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
