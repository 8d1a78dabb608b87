"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 130 interrupted (records already flushed; rerun with ``--resume``).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from typing import Optional

from . import experiment
from .kg import DataError, build_filter_index, generate_synthetic_kg, load_dataset, profile_relations, save_dataset
from .predictor import srf_features
from .scoring import EmbeddingStore, HyperParams
from .search import SearchConfig, SearchEngine, SearchRecord
from .structure import (
    InvalidArgument,
    StructureMatrix,
    builtin_structure,
    canonical_key,
    expressiveness_witnesses,
    find_witness,
    is_degenerate,
    orbit_size,
    structure_rank,
)
from .training import NumericError, evaluate, train_paths, train_structure

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERRUPT = 0, 2, 3, 4, 130

log = logging.getLogger("blmsearch")


class ConfigError(Exception):
    """Bad flag values or config file contents."""


# ---------------------------------------------------------------------------
# Structures and hyperparameters from the command line


def load_structure(text: str) -> StructureMatrix:
    """A builtin name, a JSON file, or inline JSON.

    JSON may be ``{"k": .., "entries": [[..]]}``, a bare matrix, a search
    record (``{"structure": ...}``) or a list of records (first one wins).
    """
    if os.path.exists(text):
        with open(text) as f:
            raw = f.read()
        source = text
    elif text.lstrip().startswith(("[", "{")):
        raw, source = text, "<inline>"
    else:
        return builtin_structure(text)
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: malformed structure JSON: {exc}") from None
    if isinstance(obj, list) and obj and isinstance(obj[0], dict):
        obj = obj[0]
    if isinstance(obj, dict) and "structure" in obj:
        obj = obj["structure"]
    entries = obj["entries"] if isinstance(obj, dict) else obj
    try:
        return StructureMatrix(entries)
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise DataError(f"{source}: invalid structure: {exc}") from None


def hp_from_args(args) -> HyperParams:
    base = HyperParams(k=args.k, d=args.d) if args.d % args.k == 0 else None
    if base is None:
        raise ConfigError(f"--d {args.d} is not a multiple of --k {args.k}")
    if getattr(args, "hp_file", None):
        with open(args.hp_file) as f:
            saved = json.load(f)
        saved = saved.get("hyperparams", saved)
        base = base.replace(eta=saved["eta"], lam=saved["lam"], batch_size=saved["batch_size"])
    overrides = {"seed": args.seed, "epochs": args.epochs}
    if args.eta is not None:
        overrides["eta"] = args.eta
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    return base.replace(**overrides)


def search_config_from_args(args) -> SearchConfig:
    return SearchConfig(
        algo=args.algo,
        N=args.N,
        P=args.P,
        I=args.I,
        b0=args.b0,
        p_m=args.pm,
        budget=args.budget,
        seed=args.seed,
        hp=hp_from_args(args),
        use_filter=not args.no_filter,
        use_predictor=not args.no_predictor,
        workers=args.workers,
        val_sample=args.val_sample,
    )


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise ConfigError(f"--{n.replace('_', '-')} is required for {args.command}")


def _out_path(args, name: str) -> Optional[str]:
    if not args.out:
        return None
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_json(path: Optional[str], obj) -> None:
    if path:
        with open(path, "w") as f:
            json.dump(obj, f, indent=1)


# ---------------------------------------------------------------------------
# Subcommands


def analyze_report(a: StructureMatrix) -> dict:
    wit = expressiveness_witnesses(a)
    return {
        "structure": a.tolist(),
        "degenerate": is_degenerate(a),
        "rank": structure_rank(a),
        "symmetric_witness": find_witness(a, "symmetric"),
        "skew_witness": find_witness(a, "skew"),
        "fully_expressive": wit is not None,
        "srf": srf_features(a).tolist(),
        "orbit_size": orbit_size(a),
        "canonical_key": canonical_key(a).hex(),
    }


def format_analysis(rep: dict) -> str:
    fmt = lambda w: "none" if w is None else "[" + ",".join(map(str, w)) + "]"
    lines = [
        "structure: " + json.dumps(rep["structure"]),
        f"degenerate: {'yes' if rep['degenerate'] else 'no'} (rank {rep['rank']})",
        f"symmetric witness: {fmt(rep['symmetric_witness'])}",
        f"skew witness: {fmt(rep['skew_witness'])}",
    ]
    if rep["fully_expressive"]:
        lines.append(
            f"fully expressive: yes; witnesses {fmt(rep['symmetric_witness'])} / {fmt(rep['skew_witness'])}"
        )
    else:
        lines.append("fully expressive: not certified")
    lines += [
        "srf: " + "".join(map(str, rep["srf"])),
        f"orbit size: {rep['orbit_size']}",
        f"canonical key: {rep['canonical_key']}",
    ]
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    rep = analyze_report(load_structure(args.structure))
    print(json.dumps(rep) if args.json else format_analysis(rep))
    _write_json(_out_path(args, "analysis.json"), rep)
    return EXIT_OK


def cmd_profile(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    rows = []
    for st in profile_relations(store, args.split):
        kinds = [n for n, f in (("symmetric", st.symmetric), ("anti_symmetric", st.anti_symmetric),
                                ("general_asymmetric", st.general_asymmetric)) if f]
        name = store.relations.names[st.relation]
        inv = None if st.inverse_of is None else store.relations.names[st.inverse_of]
        rows.append({"relation": name, "n_triples": st.n_triples, "n_reversed": st.n_reversed,
                     "type": kinds[0], "inverse_of": inv})
        print(f"{name}\t{st.n_triples}\t{kinds[0]}\tinverse_of={inv or '-'}")
    _write_json(_out_path(args, "profile.json"), rows)
    return EXIT_OK


def cmd_hpsearch(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    hp, trials = experiment.hpsearch(
        store,
        trials=args.trials,
        probe=load_structure(args.probe),
        d=args.d,
        k=args.k,
        epochs=args.epochs,
        batch_choices=args.batch_choices,
        seed=args.seed,
        log_path=_out_path(args, "hpsearch.jsonl"),
    )
    best = max(trials, key=lambda t: t["val_mrr"])
    _write_json(_out_path(args, "best_hyperparams.json"), {"hyperparams": hp.to_dict(), "val_mrr": best["val_mrr"]})
    print(json.dumps({"hyperparams": hp.to_dict(), "val_mrr": best["val_mrr"]}))
    return EXIT_OK


def cmd_search(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    cfg = search_config_from_args(args)
    engine = SearchEngine(cfg, store, out_dir=args.out, resume=args.resume)
    top = engine.run()
    for rec in top:
        print(f"{rec.val_mrr:.4f}\t{json.dumps(rec.structure.tolist())}")
    return EXIT_OK


def _load_top(path: str) -> list:
    try:
        with open(path) as f:
            rows = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read top structures from {path}: {exc}") from None
    return [SearchRecord.from_dict(r) for r in rows]


def cmd_finetune(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    top_path = args.top or (os.path.join(args.out, "top_structures.json") if args.out else None)
    if not top_path:
        raise ConfigError("finetune needs --top or an --out directory holding top_structures.json")
    top = _load_top(top_path)[: args.I]
    final = experiment.finetune(
        top,
        store,
        hp_from_args(args),
        trials=args.trials,
        d_choices=args.d_choices,
        batch_choices=args.batch_choices,
        seed=args.seed,
        resample_hp=not args.fixed_hp,
        checkpoint_path=_out_path(args, "final.ckpt"),
    )
    rep = final.to_dict()
    _write_json(_out_path(args, "final_report.json"), rep)
    print(json.dumps({k: rep[k] for k in ("structure", "hyperparams", "val_mrr", "test")}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    cfg = experiment.ExperimentConfig(
        data=args.data,
        k=args.k,
        search=search_config_from_args(args),
        stage1_trials=args.trials,
        probe_structure=args.probe,
        probe_d=args.probe_d,
        stage3_trials=args.stage3_trials,
        d_choices=args.d_choices,
        batch_choices=args.batch_choices,
        epochs=args.epochs,
        out=args.out,
        seed=args.seed,
    )
    final = experiment.run_pipeline(cfg, store)
    print(json.dumps({"structure": final.structure.tolist(), "val_mrr": final.val_mrr, "test": final.test.to_dict()}))
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "structure")
    store = load_dataset(args.data)
    a = load_structure(args.structure)
    hp = hp_from_args(args)
    if a.k != hp.k:
        raise ConfigError(f"structure has k={a.k} but --k is {hp.k}")
    if args.paths:
        queries = experiment.PathQuerySet.load(args.paths)
        emb, info = train_paths(a, store.n_entities, store.n_relations, queries.queries, hp, negatives=args.negatives)
        rep = info
    else:
        emb, report = train_structure(a, store, hp, eval_every=args.eval_every, patience=args.patience)
        rep = report.to_dict()
        if args.out:
            report.write_curve(_out_path(args, "train_curve.csv"))
    if args.out:
        emb.save(_out_path(args, "model.ckpt"))
        _write_json(_out_path(args, "train_report.json"),
                    {"structure": a.tolist(), "hyperparams": hp.to_dict(), "report": rep})
    print(json.dumps(rep))
    return EXIT_OK


def _load_checkpoint(args, store, a) -> EmbeddingStore:
    path = args.checkpoint or (os.path.join(args.out, "model.ckpt") if args.out else None)
    if not path or not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    emb = EmbeddingStore.load(path)
    if emb.entity.shape[0] != store.n_entities or emb.relation.shape[0] != store.n_relations:
        raise DataError("checkpoint does not match the dataset's entity/relation counts")
    if emb.k != a.k:
        raise DataError(f"checkpoint has k={emb.k} but structure has k={a.k}")
    return emb


def cmd_evaluate(args) -> int:
    _require(args, "data", "structure")
    store = load_dataset(args.data)
    a = load_structure(args.structure)
    emb = _load_checkpoint(args, store, a)
    rep = evaluate(a, emb, store.split(args.split), build_filter_index(store)).to_dict()
    _write_json(_out_path(args, f"eval_{args.split}.json"), rep)
    print(json.dumps(rep))
    return EXIT_OK


def cmd_pathgen(args) -> int:
    _require(args, "data")
    store = load_dataset(args.data)
    qs = experiment.generate_path_queries(store, args.L, args.n, seed=args.seed, split=args.split)
    path = args.queries or _out_path(args, f"paths_L{args.L}_{args.split}.tsv")
    if not path:
        raise ConfigError("pathgen needs --queries or --out")
    qs.save(path)
    print(f"wrote {len(qs)} queries to {path}")
    return EXIT_OK


def cmd_queryeval(args) -> int:
    _require(args, "data", "structure", "queries")
    store = load_dataset(args.data)
    a = load_structure(args.structure)
    emb = _load_checkpoint(args, store, a)
    qs = experiment.PathQuerySet.load(args.queries)
    answers = experiment.path_answers(store.all_triples(), qs.queries)
    rep = experiment.query_eval(a, emb, qs, answers).to_dict()
    _write_json(_out_path(args, "queryeval.json"), rep)
    print(json.dumps({"mrr": rep["mrr"], "h@3": rep["h_at"]["3"]}))
    return EXIT_OK


def cmd_synth(args) -> int:
    _require(args, "out")
    spec = {
        "n_entities": args.n_entities,
        "relations": [{"type": t, "n_triples": args.triples_per_relation} for t in args.types],
    }
    store = generate_synthetic_kg(spec, seed=args.seed)
    save_dataset(store, args.out)
    print(f"wrote {len(store.train)}/{len(store.valid)}/{len(store.test)} train/valid/test triples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; keys mirror flag names, command line wins")
    p.add_argument("--data", help="directory with train.txt / valid.txt / test.txt")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--eta", type=float, default=None, help="AdaGrad learning rate")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="L2 penalty")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--hp-file", help="JSON with eta/lam/batch_size, e.g. best_hyperparams.json")
    p.add_argument("-v", "--verbose", action="store_true")


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algo", choices=("progressive", "evolutionary", "random"), default="evolutionary")
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--N", type=int, default=128)
    p.add_argument("--P", type=int, default=8)
    p.add_argument("--I", type=int, default=8)
    p.add_argument("--b0", type=int, default=None)
    p.add_argument("--pm", type=float, default=None)
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--no-predictor", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--val-sample", type=int, default=None, help="validate candidates on this many triples")
    p.add_argument("--resume", action="store_true", help="replay an existing records.jsonl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blmsearch", description="Bilinear scoring-function structure search")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="degeneracy, expressiveness, SRF and orbit of one structure")
    p.add_argument("structure", help="builtin name, JSON file or inline JSON matrix")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("profile", help="classify relations by reversal patterns")
    _common(p)
    p.add_argument("--split", default="train", choices=("train", "valid", "test"))
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("hpsearch", help="stage 1: random hyperparameter probe")
    _common(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--probe", default="simple")
    p.add_argument("--batch-choices", type=_int_list, default=(256, 512, 1024))
    p.set_defaults(func=cmd_hpsearch)

    p = sub.add_parser("search", help="stage 2: structure search")
    _common(p)
    _search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("finetune", help="stage 3: resample structure/hyperparameters, test the winner once")
    _common(p)
    p.add_argument("--top", help="top_structures.json from a search run")
    p.add_argument("--I", type=int, default=8)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--d-choices", type=_int_list, default=(256, 512, 1024, 2048))
    p.add_argument("--batch-choices", type=_int_list, default=(256, 512, 1024))
    p.add_argument("--fixed-hp", action="store_true", help="keep eta/lambda/batch, sample only d")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("pipeline", help="all three stages in sequence")
    _common(p)
    _search_flags(p)
    p.add_argument("--trials", type=int, default=10, help="stage-1 trials")
    p.add_argument("--probe", default="simple")
    p.add_argument("--probe-d", type=int, default=64)
    p.add_argument("--stage3-trials", type=int, default=50)
    p.add_argument("--d-choices", type=_int_list, default=(256, 512, 1024, 2048))
    p.add_argument("--batch-choices", type=_int_list, default=(256, 512, 1024))
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("train", help="train one structure (triples, or path queries with --paths)")
    _common(p)
    p.add_argument("--structure", default=None)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--patience", type=int, default=0)
    p.add_argument("--paths", help="path-query file to train on instead of triples")
    p.add_argument("--negatives", type=int, default=0, help="sampled negatives per path query; 0 = full softmax")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="filtered link-prediction metrics from a checkpoint")
    _common(p)
    p.add_argument("--structure", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pathgen", help="sample multi-hop path queries by random walks")
    _common(p)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--split", default="train", choices=("train", "valid", "test"))
    p.add_argument("--queries", help="output file (default: under --out)")
    p.set_defaults(func=cmd_pathgen)

    p = sub.add_parser("queryeval", help="filtered ranking of multi-hop path queries")
    _common(p)
    p.add_argument("--structure", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--queries")
    p.set_defaults(func=cmd_queryeval)

    p = sub.add_parser("synth", help="write a synthetic KG with declared relation patterns")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-entities", type=int, default=200)
    p.add_argument("--triples-per-relation", type=int, default=1000)
    p.add_argument("--types", type=lambda s: s.split(","), default=["symmetric", "anti_symmetric", "inverse-pair"],
                   help="comma-separated: symmetric, anti_symmetric, inverse-pair")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    return _subparsers(parser)[name]


def _long_flags(p: argparse.ArgumentParser) -> dict:
    return {opt[2:]: action for action in p._actions for opt in action.option_strings if opt.startswith("--")}


def apply_config_file(parser: argparse.ArgumentParser, path: str, command: str) -> None:
    """Install INI values as defaults on the subcommand so that explicit flags still win.

    Keys from every section are read in file order; a section named after
    the subcommand is applied last.  Keys are flag names without leading
    dashes (``budget``, ``no-filter``, ``lambda``).  Keys belonging only to
    other subcommands are ignored, so one file can drive a whole pipeline;
    keys no subcommand knows are errors.
    """
    sub = _subparser(parser, command)
    known = set()
    for other in _subparsers(parser).values():
        known |= set(_long_flags(other))
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if not cp.read(path):
            raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    flags = _long_flags(sub)
    sections = [s for s in cp.sections() if s != command] + ([command] if cp.has_section(command) else [])
    defaults = {}
    for section in sections:
        for key, value in cp.items(section):
            name = key if key in known else key.replace("_", "-")
            if name not in known or name == "config":
                raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
            action = flags.get(name)
            if action is None:
                continue
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                try:
                    defaults[action.dest] = cp.getboolean(section, key)
                except ValueError:
                    raise ConfigError(f"{path}: [{section}] {key} must be a boolean") from None
                continue
            try:
                conv = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
            if action.choices is not None and conv not in action.choices:
                raise ConfigError(f"{path}: [{section}] {key} must be one of {list(action.choices)}")
            defaults[action.dest] = conv
    sub.set_defaults(**defaults)


def parse_args(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        apply_config_file(parser, args.config, args.command)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted; records flushed, rerun with --resume to continue", file=sys.stderr)
        return EXIT_INTERRUPT
    except (ConfigError, InvalidArgument, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
