"""Command-line front end: craft, victim, ablate, featviz.

Exit codes: 0 ok, 2 usage or config error, 3 infeasible experiment,
4 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import experiments as E
from . import featviz, models
from .crafting import craft, derive_seed, fc_poison_set
from .losses import AttackSpec
from .perturbation import load_poison_set, save_poison_set
from .victim import evaluate, merge_reports, wilson_interval

log = logging.getLogger("metapoison")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVARIANT = 0, 2, 3, 4

ABLATION_AXES = {
    "K": ("craft", "unroll", int),
    "ensemble": ("craft", "ensemble", int),
    "reinit": ("craft", "reinit", lambda s: s.lower() in ("1", "true", "on", "yes")),
    "eps": ("craft", "eps", float),
    "eps_c": ("craft", "eps_c", float),
    "craft_steps": ("craft", "steps", int),
    "subsample": (None, None, int),
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _digest(directory: Path) -> str:
    h = hashlib.sha256()
    for name in ("bases.f32", "g.f32", "delta.f32", "rendered.f32"):
        h.update((directory / name).read_bytes())
    return h.hexdigest()


def _spec_for(cfg: dict, test, target: int) -> AttackSpec:
    att = cfg["attack"]
    y = int(test.labels[target])
    scheme = att["scheme"]
    if scheme == "self_conceal":
        return AttackSpec(test.images[target], y, None, y, scheme, target_indices=[target])
    y_adv = att.get("y_adv")
    if y_adv == y:
        raise C.ConfigError(f"target {target} already has class {y}", "attack/y_adv")
    poison_class = None if scheme == "multiclass" else att.get("poison_class", y_adv)
    return AttackSpec(test.images[target], y, y_adv, poison_class, scheme, target_indices=[target])


def _targets(cfg: dict, train, test) -> list:
    att = cfg["attack"]
    targets = att.get("targets", "auto")
    if targets != "auto":
        for t in targets:
            if t >= len(test):
                raise C.ConfigError(f"target index {t} out of range", "attack/targets")
        return list(targets)
    vcfg = C.victim_config(cfg)
    return E.select_target(train, test, att.get("target_class", 0), C.arch_of(cfg), vcfg,
                           tuple(att.get("band", (1.5, 3.5))), count=att.get("target_count", 1))


def _initial(cfg, train, spec):
    return E.initial_poisons(train, spec, cfg["attack"].get("budget", 0.1), C.craft_config_any(cfg))


def _successes(report) -> int:
    if report.scheme == "self_conceal":
        return sum(r.misclassified for r in report.rows)
    return sum(r.success for r in report.rows)


def _load_run(run: Path):
    """Config, manifest and datasets of a craft run, with hash guardrails."""
    try:
        cfg = json.loads((run / "config.json").read_text())
        manifest = json.loads((run / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise UsageError(f"missing artifact {err.filename}") from None
    cfg = C.validate(cfg)
    h = C.config_hash(C.craft_part(cfg))
    if manifest.get("config_hash") != h:
        raise UsageError(f"config hash {h} does not match manifest {manifest.get('config_hash')}")
    train, val, test = C.build_datasets(cfg)
    if manifest.get("dataset_fingerprint") != train.fingerprint():
        raise UsageError("dataset fingerprint does not match the one the poisons were crafted on")
    return cfg, manifest, (train, val, test)


def _load_poisons(run: Path, manifest: dict, k: int):
    pdir = run / "poisons" / f"t{k}"
    try:
        ps, pm = load_poison_set(pdir)
    except FileNotFoundError as err:
        raise UsageError(f"missing artifact {err.filename}") from None
    if pm.get("config_hash") != manifest["config_hash"]:
        raise UsageError(f"poison set {pdir} was crafted under a different config")
    if _digest(pdir) != manifest["poisons"][k]["digest"]:
        raise UsageError(f"poison tensors in {pdir} do not match the manifest digest")
    return ps


# --------------------------------------------------------------------------
# commands


def craft_run(cfg: dict, out: Path) -> Path:
    """Craft poisons for every target of ``cfg``; returns the run directory."""
    h = C.config_hash(C.craft_part(cfg))
    run = out / h
    run.mkdir(parents=True, exist_ok=True)
    train, _, test = C.build_datasets(cfg)
    targets = _targets(cfg, train, test)
    ccfg = C.craft_config_any(cfg)
    arch = C.arch_of(cfg)
    pretrained = None
    if ccfg.fine_tune:
        ckpt = cfg["victim"].get("checkpoint")
        if not ckpt:
            raise C.ConfigError("fine-tune crafting needs victim.checkpoint", "victim/checkpoint")
        pretrained = models.load_checkpoint(ckpt)
    entries = []
    for k, t in enumerate(targets):
        spec = _spec_for(cfg, test, t)
        ps = _initial(cfg, train, spec)
        if ccfg.steps > 0:
            ps, trace = craft(ccfg, spec, train, ps, arch, pretrained=pretrained)
            trace.write_csv(run / f"trace_t{k}.csv")
        ps.meta.update(config_hash=h, target_index=t)
        pdir = run / "poisons" / f"t{k}"
        save_poison_set(ps, pdir, h, {"dataset_fingerprint": train.fingerprint(),
                                      "target_index": t, "scheme": spec.scheme,
                                      "y_adv": spec.y_adv, "y_true": spec.true_label,
                                      "poison_class": spec.poison_class})
        entries.append({"target_index": t, "count": len(ps), "digest": _digest(pdir)})
        log.info("target %d: %d poisons crafted", t, len(ps))
    (run / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    manifest = {"config_hash": h, "dataset_fingerprint": train.fingerprint(),
                "targets": targets, "poisons": entries}
    (run / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return run


def victim_run(run: Path, seeds=None, n_targets=None, budget=None, fc=False, jobs=1,
               victim_overrides=None, out=None) -> dict:
    cfg, manifest, (train, val, test) = _load_run(run)
    if victim_overrides:
        cfg = C.validate(C._merge(cfg, {"victim": victim_overrides}))
    vcfg = C.victim_config(cfg)
    if seeds is not None:
        vcfg.seeds = tuple(range(seeds))
    targets = manifest["targets"]
    if n_targets is not None:
        if n_targets > len(targets):
            raise UsageError(f"run has {len(targets)} crafted targets, {n_targets} requested")
        targets = targets[:n_targets]
    checkpoint = models.load_checkpoint(vcfg.checkpoint) if vcfg.mode == "fine_tune" else None
    arm = "control" if budget == 0 else ("fc" if fc else "metapoison")
    reports = []
    for k, t in enumerate(targets):
        spec = _spec_for(cfg, test, t)
        ps = None
        if arm != "control":
            ps = _load_poisons(run, manifest, k)
            if budget is not None:
                m = D.budget_count(budget, len(train))
                if m > len(ps):
                    raise UsageError(f"budget needs {m} poisons but only {len(ps)} were crafted")
                if m < len(ps):
                    ps = D.subsample_poisons(ps, m, seed=0)
        if arm == "fc":
            ref = _reference_model(train, C.arch_of(cfg), vcfg)
            ps = fc_poison_set(ref, train, ps.base_indices, spec.target_images[0],
                               eps=ps.eps, grid_size=ps.grid_size)
        reports.append(evaluate(ps, spec, vcfg, train, val, checkpoint, jobs))
    report = merge_reports(reports)
    vhash = C.config_hash({"victim": vcfg.to_dict(), "targets": targets, "arm": arm})
    dest = Path(out) if out else run / "victim" / f"{arm}_{vhash}"
    dest.mkdir(parents=True, exist_ok=True)
    report.write_json(dest / "report.json")
    report.write_csv(dest / "traces.csv")
    summary = report.summary()
    summary.update(arm=arm, config_hash=manifest["config_hash"], report_dir=str(dest))
    return summary


def _reference_model(train, arch, vcfg):
    """Clean model the feature-collision attacker owns; seed disjoint from victims."""
    s = E.REFERENCE_SEEDS[0]
    state = models.init(arch, derive_seed(s, 0x71C))
    for epoch in range(vcfg.epochs):
        state = models.train_epoch(state, train, vcfg.lr_at(epoch), vcfg.batch_size,
                                   derive_seed(s, 0x5F, epoch))
    return state


def ablate_run(cfg: dict, axis: str, grid: list, out: Path, jobs=1) -> Path:
    if axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    section, name, conv = ABLATION_AXES[axis]
    try:
        values = [conv(v) for v in grid]
    except ValueError as err:
        raise UsageError(f"bad grid value: {err}") from None
    h = C.config_hash({"cfg": cfg, "axis": axis, "grid": [str(v) for v in values]})
    dest = out / f"ablate_{axis}_{h}"
    dest.mkdir(parents=True, exist_ok=True)
    train, val, test = C.build_datasets(cfg)
    targets = _targets(cfg, train, test)
    arch, vcfg = C.arch_of(cfg), C.victim_config(cfg)
    rows = []

    def record(value, reports):
        rep = merge_reports(reports)
        s, n = _successes(rep), rep.attempts
        lo, hi = wilson_interval(s, n)
        rows.append([axis, value, s, n, s / n, lo, hi, float(rep.val_accuracies().mean())])
        log.info("%s=%s: %d/%d", axis, value, s, n)

    if axis in ("craft_steps", "subsample"):
        # one crafting run per target, sampled along the way or subsampled afterwards
        ccfg = C.craft_config(cfg)
        if axis == "craft_steps":
            ccfg.steps = max(max(values), 1)
        per_value = {v: [] for v in values}
        for t in targets:
            spec = _spec_for(cfg, test, t)
            ps0 = _initial(cfg, train, spec)
            snaps = {0: ps0.project()}

            def keep(step, poisons, trace, snaps=snaps):
                snaps[step + 1] = poisons

            ps, _ = craft(ccfg, spec, train, ps0, arch, callback=keep)
            for v in values:
                if axis == "craft_steps":
                    cur = snaps[v]
                else:
                    if v > len(ps):
                        raise UsageError(f"cannot subsample {v} from {len(ps)} poisons")
                    cur = D.subsample_poisons(ps, v, seed=0)
                per_value[v].append(evaluate(cur, spec, vcfg, train, val, jobs=jobs))
        for v in values:
            record(v, per_value[v])
    else:
        for v in values:
            c2 = C.validate(C._merge(cfg, {section: {name: v}}))
            ccfg = C.craft_config(c2)
            reports = []
            for t in targets:
                spec = _spec_for(c2, test, t)
                ps, _ = craft(ccfg, spec, train, _initial(c2, train, spec), arch)
                reports.append(evaluate(ps, spec, vcfg, train, val, jobs=jobs))
            record(v, reports)
    with open(dest / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "successes", "attempts", "success_rate", "ci_low", "ci_high",
                    "val_accuracy_mean"])
        w.writerows(rows)
    return dest


def featviz_run(run: Path, epochs: list, layer=None, seed=0, target=0, out=None) -> Path:
    cfg, manifest, (train, val, test) = _load_run(run)
    if target >= len(manifest["targets"]):
        raise UsageError(f"run has no target number {target}")
    t = manifest["targets"][target]
    spec = _spec_for(cfg, test, t)
    ps = _load_poisons(run, manifest, target)
    vcfg = C.victim_config(cfg)
    poisoned = train.replace_images(ps.apply_to(train.images))
    clean_mask = np.ones(len(train), bool)
    clean_mask[ps.base_indices] = False
    y_t = spec.true_label
    # the class the target is pushed toward
    y_o = spec.y_adv if spec.y_adv is not None else (y_t + 1) % train.num_classes
    sets = {
        "target_class": train.images[clean_mask & (train.labels == y_t)],
        "poison_class": train.images[clean_mask & (train.labels == y_o)],
        "poisons": ps.rendered,
        "target": spec.target_images,
    }
    state = models.init(vcfg.arch, derive_seed(seed, 0x71C))
    rows = []
    wanted = sorted(set(epochs))
    if wanted and wanted[-1] > vcfg.epochs:
        raise UsageError(f"epoch {wanted[-1]} beyond victim training length {vcfg.epochs}")
    for epoch in range(vcfg.epochs + 1):
        if epoch in wanted:
            weight = None
            if spec.y_adv is None:
                weight = -np.asarray(state.params["head.w"])[:, y_t]
            r, axes = featviz.project_features(state, sets, spec.y_adv, layer, epoch, weight)
            if axes.degenerate:
                log.warning("epoch %d: y axis degenerate (weight parallel to class axis)", epoch)
            rows += r
        if epoch == vcfg.epochs or epoch >= wanted[-1]:
            break
        state = models.train_epoch(state, poisoned, vcfg.lr_at(epoch), vcfg.batch_size,
                                   derive_seed(seed, 0x5F, epoch), vcfg.augment, vcfg.momentum,
                                   vcfg.weight_decay)
    dest = Path(out) if out else run / f"featviz_t{target}_s{seed}.csv"
    featviz.write_csv(rows, dest)
    return dest


# --------------------------------------------------------------------------
# argument parsing


def _overrides(args) -> dict:
    over = {}
    for text in args.set or []:
        over = C._merge(over, C.parse_assignment(text))
    if getattr(args, "steps", None) is not None:
        over = C._merge(over, {"craft": {"steps": args.steps}})
    return over


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapoison", description=__doc__.splitlines()[0])
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config merged over the preset")
        sp.add_argument("--preset", default="desk", choices=sorted(C.PRESETS))
        sp.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one scalar field (repeatable)")
        sp.add_argument("--out", default="runs", help="root for run directories")

    sp = sub.add_parser("craft", parents=[verbose], help="craft poisons")
    common(sp)
    sp.add_argument("--steps", type=int, help="override craft.steps (0 leaves bases untouched)")

    sp = sub.add_parser("victim", parents=[verbose], help="train victims on a crafted run")
    sp.add_argument("run", help="run directory written by craft")
    sp.add_argument("--seeds", type=int, help="use victim seeds 0..N-1")
    sp.add_argument("--targets", type=int, help="evaluate the first N crafted targets")
    sp.add_argument("--budget", type=float, help="poison budget; 0 runs the unpoisoned control")
    sp.add_argument("--fc", action="store_true", help="feature-collision poisons on the same bases")
    sp.add_argument("--victim-config", help="JSON object overriding victim fields")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", help="report directory (default: inside the run)")

    sp = sub.add_parser("ablate", parents=[verbose], help="sweep one axis and tabulate success rates")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--grid", required=True, help="comma-separated values")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("featviz", parents=[verbose], help="feature projections over victim training")
    sp.add_argument("run")
    sp.add_argument("--epochs", type=_int_list, default=[0, 10, 50, 100])
    sp.add_argument("--layer", type=int, help="hidden block index (default: penultimate)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--target", type=int, default=0)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "craft":
            cfg = C.load(args.config, args.preset, _overrides(args))
            run = craft_run(cfg, Path(args.out))
            print(run)
        elif args.command == "victim":
            over = None
            if args.victim_config:
                try:
                    over = json.loads(Path(args.victim_config).read_text())
                except (OSError, json.JSONDecodeError) as err:
                    raise C.ConfigError(f"victim config: {err}") from None
            summary = victim_run(Path(args.run), args.seeds, args.targets, args.budget, args.fc,
                                 args.jobs, over, args.out)
            print(json.dumps(summary, indent=1, sort_keys=True))
        elif args.command == "ablate":
            if args.axis not in ABLATION_AXES:
                raise UsageError(f"unknown ablation axis {args.axis!r}; "
                                 f"choose from {sorted(ABLATION_AXES)}")
            cfg = C.load(args.config, args.preset, _overrides(args))
            dest = ablate_run(cfg, args.axis, args.grid.split(","), Path(args.out), args.jobs)
            print(dest / "sweep.csv")
        elif args.command == "featviz":
            print(featviz_run(Path(args.run), args.epochs, args.layer, args.seed, args.target,
                              args.out))
    except (C.ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except D.InsufficientClassError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except AssertionError as err:
        print(f"invariant failure: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
