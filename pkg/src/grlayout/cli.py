"""Operator command line: the full experiment lifecycle.

Subcommands: validate, synth, train, eval, score, cost, attn.  Run configs are
flat key=value files (see runconfig); every command prints the resolved
configuration it ran with, and all randomness flows from the config's root
seed, split per subsystem.

Exit codes: 0 success, 1 validation or assertion failure, 2 usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .costs import cost_report
from .data import (
    Interaction, ItemVocab, Split, UserSequence, apply_vocab, index_items,
    k_core_filter, load_interactions, save_interactions, split_last_day,
    split_leave_one_out,
)
from .inference import (
    attention_probe, retrieve_topk, score_parallel, score_sequential_oracle,
)
from .layouts import ANTI_PATTERNS, LayoutSpec, N_RESERVED, PRESETS, preset, token_count
from .metrics import evaluate
from .model import ActionStats, ModelConfig, load_checkpoint, save_checkpoint
from .runconfig import (
    apply_section, check_consumed, dataclass_flat, format_flat, load_kv_file,
    parse_kv_args,
)
from .synthetic import SyntheticConfig, generate_synthetic, to_records
from .training import TrainConfig, build_model, train
from .validation import validate


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


# -- config sections beyond the library dataclasses ---------------------------


@dataclass
class DataSettings:
    path: str | None = None      # interaction TSV
    synth: str | None = None     # synthetic config file, generated in memory
    has_header: bool = False
    k_core: int = 0


@dataclass
class SplitSettings:
    kind: str = "leave_one_out"  # or "last_day"
    min_len: int = 3
    day_seconds: float = 86400.0


@dataclass
class EvalSettings:
    split: str = "test"          # or "val"
    negatives: int = 99
    full_vocab: bool = False
    ks: str = "5,10"
    batch_size: int = 64


# -- small helpers -------------------------------------------------------------


def _print_resolved(flat: dict) -> None:
    print("resolved configuration:")
    for line in format_flat(flat).splitlines():
        print(f"  {line}")


def _load_flat(path: str, overrides: list[str] | None) -> dict[str, str]:
    try:
        flat = load_kv_file(path)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    if overrides:
        try:
            flat.update(parse_kv_args(overrides))
        except ValueError as e:
            raise CliError(2, str(e)) from None
    return flat


def _require_seed(flat: dict[str, str], used: set[str]) -> int:
    if "seed" not in flat:
        raise CliError(2, "config must set a root seed (seed=<int>)")
    used.add("seed")
    try:
        return int(flat["seed"])
    except ValueError:
        raise CliError(2, f"seed must be an integer, got {flat['seed']!r}") from None


def _resolve_layout(ref: str) -> LayoutSpec:
    if os.path.exists(ref) or os.sep in ref or ref.endswith(".layout"):
        with open(ref, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            return LayoutSpec.from_text(text)
        except ValueError as e:
            raise CliError(2, f"{ref}: {e}") from None
    try:
        return preset(ref)
    except KeyError as e:
        raise CliError(2, str(e.args[0])) from None


def _load_records(path: str, has_header: bool = False) -> list[Interaction]:
    try:
        return load_interactions(path, has_header)
    except ValueError as e:
        raise CliError(3, str(e)) from None


def _load_synth_config(path: str) -> tuple[SyntheticConfig, int]:
    flat = _load_flat(path, None)
    used: set[str] = set()
    seed = _require_seed(flat, used)
    sc = SyntheticConfig()
    try:
        apply_section(sc, "synth", flat, used)
        check_consumed(flat, used)
        sc.validate()
    except ValueError as e:
        raise CliError(2, f"{path}: {e}") from None
    return sc, seed


def _load_corpus(ds: DataSettings) -> tuple[list[UserSequence], ItemVocab | None, int]:
    """Returns (users, vocab or None for synthetic, vocab_size)."""
    if (ds.path is None) == (ds.synth is None):
        raise CliError(2, "set exactly one of data.path / data.synth")
    if ds.synth is not None:
        sc, synth_seed = _load_synth_config(ds.synth)
        users, _ = generate_synthetic(sc, synth_seed)
        return users, None, sc.items + N_RESERVED
    records = _load_records(ds.path, ds.has_header)
    if ds.k_core > 0:
        records = k_core_filter(records, ds.k_core)
    if not records:
        raise CliError(3, f"{ds.path}: no interactions after filtering")
    vocab, users = index_items(records)
    return users, vocab, vocab.size


def _split_corpus(users: list[UserSequence], ss: SplitSettings) -> Split:
    try:
        if ss.kind == "leave_one_out":
            return split_leave_one_out(users, min_len=ss.min_len)
        if ss.kind == "last_day":
            return split_last_day(users, day_seconds=ss.day_seconds)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    raise CliError(2, f"unknown split.kind {ss.kind!r} (leave_one_out or last_day)")


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise CliError(2, f"eval.ks must be comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise CliError(2, f"eval.ks must be positive integers, got {text!r}")
    return ks


def _out_dir(args) -> str:
    out = getattr(args, "out_dir", None)
    if not out:
        raise CliError(2, "this command writes files; pass --out-dir")
    os.makedirs(out, exist_ok=True)
    return out


def _write_text(out_dir: str, name: str, text: str, produced: list[str]) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    produced.append(name)
    return path


def _write_manifest(out_dir: str, produced: list[str]) -> None:
    lines = []
    for name in produced:
        with open(os.path.join(out_dir, name), "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        lines.append(f"{digest}  {name}")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(produced)} files + manifest.txt under {out_dir}")


def _users_from_records(records: list[Interaction],
                        vocab_keys: list[str] | None) -> list[UserSequence]:
    if vocab_keys is not None:
        return apply_vocab(records, ItemVocab(vocab_keys))
    # Vocabulary-free checkpoint (trained on in-memory synthetic ids): item
    # keys must already be the integer ids the model was trained on.
    by_user: dict[str, list[Interaction]] = {}
    for r in sorted(records, key=lambda r: (r.user, r.ts)):
        by_user.setdefault(r.user, []).append(r)
    users = []
    for user, rows in by_user.items():
        try:
            items = np.array([int(r.item) for r in rows], dtype=np.int64)
        except ValueError:
            raise CliError(2, "checkpoint has no item vocabulary; item keys must "
                              "be integer model ids") from None
        users.append(UserSequence(
            user=user, items=items,
            actions=np.array([r.actions for r in rows], dtype=np.float32),
            ts=np.array([r.ts for r in rows], dtype=np.float64)))
    return users


def _pick_user(users: list[UserSequence], wanted: str | None) -> UserSequence:
    if wanted is not None:
        for u in users:
            if u.user == wanted:
                return u
        raise CliError(2, f"user {wanted!r} not present in the sequence file")
    if len(users) != 1:
        raise CliError(2, f"sequence file holds {len(users)} users; pick one with --user")
    return users[0]


def _load_checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except ValueError as e:
        raise CliError(3, str(e)) from None


def _checkpoint_stats(model, meta) -> ActionStats:
    return meta["stats"] if meta["stats"] is not None else ActionStats.identity(
        model.config.action_dims)


# -- subcommands ---------------------------------------------------------------


def cmd_validate(args) -> int:
    if args.spec == "ALL":
        specs = [PRESETS[n] for n in sorted(PRESETS)]
        specs += [ANTI_PATTERNS[n] for n in sorted(ANTI_PATTERNS)]
    else:
        specs = [_resolve_layout(args.spec)]
    _print_resolved({"spec": args.spec, "json": args.json})
    all_pass = True
    docs = []
    for s in specs:
        report = validate(s)
        all_pass &= report.overall_pass
        if args.json:
            docs.append(report.to_json_dict())
        else:
            print(report.to_text())
    if args.json:
        print(json.dumps(docs if args.spec == "ALL" else docs[0], indent=1))
    return 0 if all_pass else 1


def cmd_synth(args) -> int:
    sc, seed = _load_synth_config(args.config)
    out = args.out
    os.makedirs(out, exist_ok=True)
    resolved = {"seed": seed, **dataclass_flat(sc, "synth")}
    _print_resolved(resolved)
    users, truth = generate_synthetic(sc, seed)
    records = to_records(users)
    produced: list[str] = []
    save_interactions(os.path.join(out, "interactions.tsv"), records)
    produced.append("interactions.tsv")
    _write_text(out, "truth.json", truth.to_json(), produced)
    _write_text(out, "resolved.cfg", format_flat(resolved), produced)
    _write_manifest(out, produced)
    print(f"{len(users)} users, {len(records)} interactions, "
          f"{sc.items} items -> {out}/interactions.tsv")
    return 0


def _resolved_run(seed, spec, ds, ss, mc=None, tc=None, es=None) -> dict:
    flat = {"seed": seed, "layout": spec.name}
    flat.update(dataclass_flat(ds, "data"))
    flat.update(dataclass_flat(ss, "split"))
    if mc is not None:
        flat.update(dataclass_flat(mc, "model"))
    if tc is not None:
        flat.update(dataclass_flat(tc, "train"))
    if es is not None:
        flat.update(dataclass_flat(es, "eval"))
    return flat


def cmd_train(args) -> int:
    out = _out_dir(args)
    flat = _load_flat(args.runconfig, args.set)
    used = {k for k in flat if k.startswith("eval.")}
    seed = _require_seed(flat, used)
    if "layout" not in flat:
        raise CliError(2, "config must name a layout (layout=<preset or file>)")
    spec = _resolve_layout(flat["layout"])
    used.add("layout")

    ds, ss = DataSettings(), SplitSettings()
    try:
        apply_section(ds, "data", flat, used)
        apply_section(ss, "split", flat, used)
    except ValueError as e:
        raise CliError(2, str(e)) from None

    users, vocab, vocab_size = _load_corpus(ds)
    split = _split_corpus(users, ss)
    if not split.train:
        raise CliError(2, "training split is empty; check split settings")
    D = int(split.train[0].actions.shape[1])
    max_tok = max(token_count(spec, len(u))
                  for part in (split.train, split.val, split.test) for u in part)

    mc = ModelConfig(vocab_size=vocab_size, action_dims=D, max_seq_len=max_tok + 1)
    tc = TrainConfig(seed=seed)
    try:
        apply_section(mc, "model", flat, used)
        apply_section(tc, "train", flat, used)
        check_consumed(flat, used)
        mc.validate()
        tc.validate()
    except ValueError as e:
        raise CliError(2, str(e)) from None

    report = validate(spec)
    if not report.p3.passed and not tc.allow_leakage:
        print(report.to_text())
        raise CliError(1, f"layout '{spec.name}' fails the leakage check; "
                          f"set train.allow_leakage=true to train it anyway")

    resolved = _resolved_run(seed, spec, ds, ss, mc=mc, tc=tc)
    _print_resolved(resolved)
    print(f"corpus: {len(users)} users -> train {len(split.train)}, "
          f"val {len(split.val)}, test {len(split.test)}; vocab {vocab_size}")

    model = build_model(spec, mc, seed)
    every = max(1, tc.steps // 20)

    def progress(step, total, loss):
        if step % every == 0 or step == total:
            print(f"  step {step:>6}/{total}  loss {loss:.4f}")

    result = train(model, split.train, tc, progress=progress)

    produced: list[str] = []
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(ckpt, model, seed, tc.steps, stats=result.stats,
                    item_vocab=vocab.keys if vocab is not None else None,
                    extra={"layout": spec.name, "split": ss.kind,
                           "data": ds.path or ds.synth})
    produced.append("checkpoint.bin")

    D_act = model.config.action_dims
    header = ["step", "loss", "item"] + [f"action_{d}" for d in range(D_act)] + ["lr"]
    rows = [",".join(header)]
    for r in result.curve:
        acts = r["action"] if r["action"] is not None else [""] * D_act
        rows.append(",".join(
            [str(r["step"]), repr(r["loss"]),
             "" if r["item"] is None else repr(r["item"])]
            + [a if a == "" else repr(a) for a in acts] + [repr(r["lr"])]))
    _write_text(out, "loss.csv", "\n".join(rows) + "\n", produced)
    _write_text(out, "resolved.cfg", format_flat(resolved), produced)
    _write_manifest(out, produced)
    print(f"final loss {result.curve[-1]['loss']:.4f} after {tc.steps} steps; "
          f"checkpoint at {ckpt}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model, meta = _load_checkpoint(args.checkpoint)
    flat = _load_flat(args.runconfig, args.set)
    used = {k for k in flat if k.startswith(("train.", "model.")) or k == "layout"}
    seed = _require_seed(flat, used)

    ds, ss, es = DataSettings(), SplitSettings(), EvalSettings()
    try:
        apply_section(ds, "data", flat, used)
        apply_section(ss, "split", flat, used)
        apply_section(es, "eval", flat, used)
        check_consumed(flat, used)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    ks = _parse_ks(es.ks)
    if es.split not in ("val", "test"):
        raise CliError(2, f"eval.split must be val or test, got {es.split!r}")

    if ds.synth is not None:
        users, _, _ = _load_corpus(ds)
    else:
        if ds.path is None:
            raise CliError(2, "set exactly one of data.path / data.synth")
        records = _load_records(ds.path, ds.has_header)
        if ds.k_core > 0:
            records = k_core_filter(records, ds.k_core)
        users = _users_from_records(records, meta["item_vocab"])
    split = _split_corpus(users, ss)
    eval_users = split.val if es.split == "val" else split.test
    if not eval_users:
        raise CliError(2, f"evaluation split '{es.split}' is empty")

    resolved = _resolved_run(seed, model.spec, ds, ss, es=es)
    _print_resolved(resolved)
    report = evaluate(model, eval_users, _checkpoint_stats(model, meta), ks=ks,
                      n_negatives=es.negatives, seed=seed,
                      full_vocab=es.full_vocab, batch_size=es.batch_size)
    print(report.to_text())
    produced: list[str] = []
    _write_text(out, "eval.json", json.dumps(report.to_json_dict(), indent=1) + "\n",
                produced)
    _write_manifest(out, produced)
    return 0


def cmd_score(args) -> int:
    out = _out_dir(args)
    model, meta = _load_checkpoint(args.checkpoint)
    records = _load_records(args.history)
    users = _users_from_records(records, meta["item_vocab"])
    u = _pick_user(users, args.user)

    with open(args.candidates, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh.read().splitlines()]
    keys = [ln for ln in lines if ln and not ln.startswith("#")]
    if not keys:
        raise CliError(2, f"{args.candidates}: no candidate entries")
    vocab_keys = meta["item_vocab"]
    vocab = ItemVocab(vocab_keys) if vocab_keys is not None else None
    cand = []
    for key in keys:
        if vocab is not None:
            if key not in vocab.id_of:
                raise CliError(2, f"candidate {key!r} is not in the model vocabulary")
            cand.append(vocab.id_of[key])
        else:
            try:
                cand.append(int(key))
            except ValueError:
                raise CliError(2, f"candidate {key!r}: checkpoint has no vocabulary, "
                                  f"ids must be integers") from None
    cand = np.array(sorted(set(cand)), dtype=np.int64)

    stats = _checkpoint_stats(model, meta)
    _print_resolved({"checkpoint": args.checkpoint, "user": u.user,
                     "history_len": len(u), "candidates": len(cand),
                     "oracle": bool(args.oracle), "tol": args.tol})
    try:
        table = score_parallel(model, u.items, u.actions, cand, stats)
    except ValueError as e:
        raise CliError(2, str(e)) from None

    if args.oracle:
        ref = score_sequential_oracle(model, u.items, u.actions, cand, stats)
        worst = 0.0
        if table.retrieval_logprob is not None:
            worst = max(worst, float(np.abs(table.retrieval_logprob
                                            - ref.retrieval_logprob).max()))
        if table.action_pred is not None:
            worst = max(worst, float(np.abs(table.action_pred - ref.action_pred).max()))
        print(f"oracle agreement: max |parallel - sequential| = {worst:.3e}")
        if worst > args.tol:
            raise CliError(1, f"parallel scorer disagrees with the sequential "
                              f"oracle by {worst:.3e} (tolerance {args.tol:g})")

    produced: list[str] = []
    _write_text(out, "scores.csv", table.to_csv(), produced)
    _write_manifest(out, produced)
    if table.retrieval_logprob is not None:
        ids, scores = retrieve_topk(table.candidate_ids, table.retrieval_logprob,
                                    min(args.topk, len(cand)))
        print("top candidates by retrieval log-probability:")
        for i, s in zip(ids, scores):
            print(f"  {int(i):>8}  {s:.4f}")
    return 0


def cmd_cost(args) -> int:
    try:
        rep = cost_report(args.T, args.C, d=args.d, interleaved=args.interleaved)
    except ValueError as e:
        raise CliError(2, str(e)) from None
    _print_resolved({"T": args.T, "C": args.C, "d": args.d,
                     "interleaved": args.interleaved, "sweep": args.sweep})
    print(rep.to_text())
    if args.sweep:
        out = _out_dir(args)
        grid = []
        t = 16
        while t < args.T:
            grid.append(t)
            t *= 2
        grid.append(args.T)
        cs = sorted({0, args.C})
        rows = []
        for T in grid:
            for C in cs:
                rows.append(cost_report(T, C, d=args.d,
                                        interleaved=args.interleaved).to_flat())
        header = list(rows[0].keys())
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(str(r[k]) for k in header))
        produced: list[str] = []
        _write_text(out, "cost_sweep.csv", "\n".join(lines) + "\n", produced)
        _write_manifest(out, produced)
    return 0


def cmd_attn(args) -> int:
    out = _out_dir(args)
    model, meta = _load_checkpoint(args.checkpoint)
    stats = _checkpoint_stats(model, meta)
    if args.figure2_probe:
        probe = attention_probe(model)
        source = "figure2-probe"
    else:
        if not args.sequence:
            raise CliError(2, "pass a sequence TSV or --figure2-probe")
        records = _load_records(args.sequence)
        users = _users_from_records(records, meta["item_vocab"])
        u = _pick_user(users, args.user)
        probe = attention_probe(model, items=u.items,
                                actions=stats.normalize(u.actions))
        source = u.user
    _print_resolved({"checkpoint": args.checkpoint, "source": source,
                     "layers": probe.maps.shape[0], "heads": probe.maps.shape[1],
                     "tokens": probe.maps.shape[2]})

    produced: list[str] = []
    n_layers, n_heads, L, _ = probe.maps.shape
    for li in range(n_layers):
        for hi in range(n_heads):
            lines = [",".join(repr(float(v)) for v in row)
                     for row in probe.maps[li, hi]]
            _write_text(out, f"attn_l{li}_h{hi}.csv", "\n".join(lines) + "\n",
                        produced)
    tok_lines = ["token,item_id"]
    tok_lines += [f"{i},{int(v)}" for i, v in enumerate(probe.item_ids)]
    _write_text(out, "tokens.csv", "\n".join(tok_lines) + "\n", produced)
    _write_manifest(out, produced)

    dev = float(np.abs(probe.row_sums() - 1.0).max())
    lag = ", ".join(f"{v:.3f}" for v in probe.lag_mass())
    print(f"row-sum max deviation {dev:.2e}; masked mass {probe.masked_mass():.1e}")
    print(f"last-layer lag-1 attention per head: {lag}")
    return 0


# -- parser --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="grlayout",
        description="Token-layout design laboratory for generative recommendation.")
    sub = p.add_subparsers(dest="command")

    v = sub.add_parser("validate", help="check a layout against the three principles")
    v.add_argument("spec", help="preset name, layout file path, or ALL")
    v.add_argument("--json", action="store_true", help="print machine-readable reports")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", help="generate a synthetic interaction corpus")
    s.add_argument("config", help="flat config with seed= and synth.* keys")
    s.add_argument("out", help="output directory for TSV + ground-truth sidecar")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one layout per a run config")
    t.add_argument("runconfig")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    e.add_argument("runconfig")
    e.add_argument("checkpoint")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", help="score candidates for one user history")
    sc.add_argument("checkpoint")
    sc.add_argument("history", help="interaction TSV holding the user history")
    sc.add_argument("candidates", help="file with one candidate item per line")
    sc.add_argument("--out-dir", required=True)
    sc.add_argument("--user", default=None, help="user id when the TSV has several")
    sc.add_argument("--oracle", action="store_true",
                    help="also run the sequential oracle and assert agreement")
    sc.add_argument("--tol", type=float, default=1e-5)
    sc.add_argument("--topk", type=int, default=10)
    sc.set_defaults(func=cmd_score)

    c = sub.add_parser("cost", help="attention/linear cost of the candidate mask")
    c.add_argument("--T", type=int, required=True, help="history tokens")
    c.add_argument("--C", type=int, default=0, help="candidate tokens")
    c.add_argument("--d", type=int, default=None, help="model width for FLOPs ratios")
    c.add_argument("--interleaved", action="store_true",
                   help="T counts interactions rendered as two tokens each")
    c.add_argument("--sweep", action="store_true", help="write a CSV grid sweep")
    c.add_argument("--out-dir", default=None)
    c.set_defaults(func=cmd_cost)

    a = sub.add_parser("attn", help="dump attention maps for a sequence")
    a.add_argument("checkpoint")
    a.add_argument("sequence", nargs="?", default=None)
    a.add_argument("--figure2-probe", action="store_true",
                   help="use the diagnostic repeated-item probe sequence")
    a.add_argument("--user", default=None)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_attn)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
