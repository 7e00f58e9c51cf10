"""Command-line entry point: ``emgup synth|pretrain|adapt|eval|ablate``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Set ``EMGUP_LOG_LEVEL`` (e.g. ``DEBUG``) to change verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from filelock import FileLock, Timeout

from .config import RunConfig, derive_seed
from .data import (
    ConfigurationError,
    LabeledWindows,
    load_records,
    make_cross_user_splits,
    save_records,
    synth_generate,
    windows_from_records,
)
from .evaluation import (
    AblationCell,
    AblationConfig,
    VARIANTS,
    adapt_user,
    evaluate_user,
    prepare_windows,
    run_ablation,
    source_model,
    summarize,
    write_summary,
)
from .model import decode_checkpoint, save_checkpoint

log = logging.getLogger("emgup")

RECORD_SUFFIX = ".emg"
LOCK_NAME = ".emgup.lock"
MODE_VARIANT = {"none": "so", "ssa": "ssa", "ssp": "ssp", "full": "full"}


# ---------------------------------------------------------------------------
# data directory helpers
# ---------------------------------------------------------------------------


def user_file(data_dir, user: str) -> Path:
    return Path(data_dir) / f"{user}{RECORD_SUFFIX}"


def known_users(data_dir) -> list[str]:
    """Users present in a data directory, from file names only."""
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return sorted(p.name[: -len(RECORD_SUFFIX)] for p in d.glob(f"*{RECORD_SUFFIX}"))


def load_users(data_dir, users) -> list:
    records = []
    for u in users:
        records.extend(load_records(user_file(data_dir, u)))
    return records


def resolve_user(data_dir, user: str) -> str:
    users = known_users(data_dir)
    if user not in users:
        raise LookupError(f"unknown user {user!r}; known users: {', '.join(users) or '(none)'}")
    return user


def _stamp(rc: RunConfig) -> dict:
    return {"config_fingerprint": rc.fingerprint(), "seed": rc.seed}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(rc: RunConfig, args, out: Path) -> int:
    records, _, _ = synth_generate(rc.synth())
    by_user: dict[str, list] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    manifest = {**_stamp(rc), "num_classes": rc.num_classes, "channels": rc.synth_channels, "users": {}}
    for user, recs in sorted(by_user.items()):
        save_records(recs, user_file(out, user))
        lw = windows_from_records(recs, rc.window_length, rc.window_stride)
        manifest["users"][user] = {
            "file": user_file(out, user).name,
            "records": len(recs),
            "samples": int(sum(r.num_samples for r in recs)),
            "windows": len(lw),
            "class_counts": {str(k): v for k, v in sorted(Counter(lw.labels.tolist()).items())},
        }
    manifest["total_windows"] = sum(u["windows"] for u in manifest["users"].values())
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(by_user)} users, {manifest['total_windows']} windows to {out}")
    return 0


def _split_for(rc: RunConfig, data_dir):
    users = known_users(data_dir)
    splits = make_cross_user_splits(users, rc.num_folds, derive_seed(rc.seed, "split"))
    if not 0 <= rc.fold < len(splits):
        raise ConfigurationError(f"fold {rc.fold} outside [0, {len(splits)})")
    return splits[rc.fold]


def cmd_pretrain(rc: RunConfig, args, out: Path) -> int:
    data_dir = args.data or rc.data_dir
    split = _split_for(rc, data_dir)

    def labeled(users) -> LabeledWindows:
        return windows_from_records(load_users(data_dir, users), rc.window_length, rc.window_stride)

    model, result = source_model(rc, labeled(split.train_users), labeled(split.val_users), rc.seed, split.fold_index)
    fp = rc.fingerprint()
    ckpt = out / f"source__fold{split.fold_index}__{fp}.ckpt"
    save_checkpoint(model, ckpt)
    with open(out / f"pretrain_log__fold{split.fold_index}__{fp}.csv", "w") as fh:
        fh.write(f"# config_fingerprint={fp} seed={rc.seed}\nepoch,train_loss,val_acc\n")
        for epoch, loss, acc in result.log:
            fh.write(f"{epoch},{loss!r},{acc!r}\n")
    _write_json(
        out / f"split__fold{split.fold_index}__{fp}.json",
        {
            **_stamp(rc),
            "fold": split.fold_index,
            "train_users": split.train_users,
            "val_users": split.val_users,
            "test_users": split.test_users,
            "best_epoch": result.best_epoch,
        },
    )
    print(ckpt)
    return 0


def cmd_adapt(rc: RunConfig, args, out: Path) -> int:
    if not args.checkpoint or not args.user:
        raise ConfigurationError("adapt needs --checkpoint and --user")
    mode = args.mode or rc.mode
    data_dir = args.data or rc.data_dir
    user = resolve_user(data_dir, args.user)
    blob = Path(args.checkpoint).read_bytes()
    target_path = out / f"{user}__{mode}__{rc.fingerprint()}.ckpt"
    if mode == "none":
        target_path.write_bytes(blob)
        print(target_path)
        return 0
    source = decode_checkpoint(blob)
    # only this user's file is read; labels are dropped before adaptation
    lw = windows_from_records(load_users(data_dir, [user]), rc.window_length, rc.window_stride)
    target = LabeledWindows(prepare_windows(source, lw.windows), lw.labels, lw.record_ids, lw.user_ids).strip_labels()
    del lw
    use_ssa, use_ssp = VARIANTS[MODE_VARIANT[mode]]
    cell = AblationCell(use_ssa, use_ssp, rc.ssp_filtering, rc.view_mode, rc.context_window)
    model = adapt_user(source, target, rc, cell, rc.seed, user)
    model.provenance.update({"user": user, "mode": mode, **{k: str(v) for k, v in _stamp(rc).items()}})
    save_checkpoint(model, target_path)
    print(target_path)
    return 0


def cmd_eval(rc: RunConfig, args, out: Path) -> int:
    if not args.checkpoint or not args.user:
        raise ConfigurationError("eval needs --checkpoint and --user")
    data_dir = args.data or rc.data_dir
    user = resolve_user(data_dir, args.user)
    blob = Path(args.checkpoint).read_bytes()
    model = decode_checkpoint(blob)
    m = evaluate_user(model, windows_from_records(load_users(data_dir, [user]), rc.window_length, rc.window_stride))
    report = {
        **_stamp(rc),
        "user": user,
        "checkpoint": Path(args.checkpoint).name,
        "checkpoint_sha256": hashlib.sha256(blob).hexdigest(),
        "acc": m.acc,
        "mf1": m.mf1,
        "n_windows": int(m.confusion.sum()),
        "confusion": m.confusion.tolist(),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    (out / f"{user}__metrics__{Path(args.checkpoint).stem}.json").write_text(text + "\n")
    return 0


def cmd_ablate(rc: RunConfig, args, out: Path) -> int:
    grid = AblationConfig.from_run_config(rc)
    data_dir = args.data
    if data_dir:
        records = load_users(data_dir, known_users(data_dir))
        dataset = records
    else:
        def dataset(seed):
            return synth_generate(rc.synth(seed))[0]

    reports = run_ablation(dataset, rc, grid)
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    for cell, reps in reports.items():
        for rep in reps:
            rep.save(cells_dir / f"{cell.label()}__seed{rep.seed}.json")
    rows = summarize(reports)
    write_summary(rows, out / f"ablation_summary__{rc.fingerprint()}.csv")
    for row in rows:
        print(
            f"{row['variant']:5s} T={row['T']!s:3s} view={row['view_mode'] or '-':9s} "
            f"filter={row['filtering'] or '-':5s} acc={row['mean_acc']:.4f} mf1={row['mean_mf1']:.4f}"
        )
    return 0


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emgup", description="Source-free EMG personalization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory (default: config out_dir)")
        s.add_argument("--data", help="record directory (default: config data_dir)")
        if name in ("adapt", "eval"):
            s.add_argument("--checkpoint")
            s.add_argument("--user")
        if name == "adapt":
            s.add_argument("--mode", choices=sorted(MODE_VARIANT))
    return p


def main(argv=None) -> int:
    level = os.environ.get("EMGUP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed, "out_dir": args.out}
        rc = RunConfig.load(args.config, **overrides) if args.config else RunConfig(
            **{k: v for k, v in overrides.items() if v is not None}
        )
        out = Path(rc.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / LOCK_NAME), timeout=0):
            return COMMANDS[args.command](rc, args, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Timeout:
        print(f"output directory {rc.out_dir} is locked by another process", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
