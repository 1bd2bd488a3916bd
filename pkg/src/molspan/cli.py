"""Command-line surface: dataset pipeline, training, sampling, evaluation.

Every command accepts ``--seed`` and ``--config FILE`` (JSON defaults;
explicit flags win), and echoes its resolved configuration into whatever
artifact it writes. Exit codes: 0 success, 1 usage, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codec
from .data import (Corpus, DataError, SYNTH_PROPERTIES, generate_synthetic,
                   load_corpus, split_corpus, train_keys)
from .graph import IsomorphismUndecided, is_isomorphic
from .masking import MaskViolation
from .metrics import evaluation_report
from .model import (CheckpointError, ModelConfig, NonFiniteLoss, init_params,
                    load_checkpoint, save_checkpoint)
from .properties import PropertyDef, PropertySpec, fit_spec, load_spec
from .sampling import SampleRequest, sample_best_of_k
from .smiles import SmilesError, parse_smiles, write_smiles
from .training import Example, TrainConfig, TrainingDiverged, train
from .vocab import VocabFileError, default_seed_vocab, induce_vocab, load_vocab

DATA_ERRORS = (DataError, SmilesError, VocabFileError, CheckpointError,
               codec.DecodeError, codec.EncodeError, FileNotFoundError,
               IsADirectoryError, NotADirectoryError, PermissionError,
               json.JSONDecodeError, ValueError, KeyError)
INTERNAL_ERRORS = (MaskViolation, TrainingDiverged, NonFiniteLoss,
                   IsomorphismUndecided, AssertionError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_target(text: str) -> dict:
    """'molWt=350,ring_count=2' -> {'molWt': 350.0, 'ring_count': 2.0}."""
    out: dict = {}
    if not text:
        return out
    for part in text.split(","):
        if "=" not in part:
            raise DataError(f"bad target entry {part!r}; expected name=value")
        name, value = part.split("=", 1)
        try:
            out[name.strip()] = float(value)
        except ValueError:
            out[name.strip()] = value.strip()
    return out


def _resolved(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    """JSON config supplies defaults; explicitly passed flags override."""
    if not getattr(args, "config", None):
        return
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise DataError(f"{args.config}: config file must hold a JSON object")
    explicit = {a.split("=")[0] for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if flag in explicit:
            continue
        if not hasattr(args, key):
            raise DataError(f"{args.config}: unknown config key {key!r}")
        setattr(args, key, value)


# ---------------------------------------------------------------------------
# Commands

def cmd_build_vocab(args) -> int:
    corpus = load_corpus(args.data, args.props,
                         categorical=frozenset(args.categorical.split(","))
                         if args.categorical else frozenset())
    for lineno, msg in corpus.failures:
        print(f"warning: skipped line {lineno}: {msg}", file=sys.stderr)
    vocab = induce_vocab([ex.graph for ex in corpus.examples], r_max=args.r_max)
    splits = split_corpus(corpus)
    train_idx = splits["train"]
    if corpus.property_names:
        names = corpus.property_names
        kinds = [corpus.property_kinds[n] for n in names]
        cols = [[corpus.examples[i].raw_props.get(n) for i in train_idx]
                for n in names]
        spec = fit_spec(names, kinds, cols)
    else:
        spec = PropertySpec(())
    payload = vocab.to_json()
    payload["provenance"] = _resolved(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    props_out = args.props_out or str(Path(args.out).with_name("props.json"))
    spec_payload = spec.to_json()
    spec_payload["provenance"] = _resolved(args)
    with open(props_out, "w", encoding="utf-8") as fh:
        json.dump(spec_payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{len(corpus.examples)} molecules "
          f"(splits: {len(splits['train'])}/{len(splits['valid'])}/{len(splits['test'])}), "
          f"{vocab.n_atoms} atom tokens -> {args.out}; "
          f"property spec ({spec.total} properties) -> {props_out}")
    return 0


def cmd_gen_synth(args) -> int:
    vocab = default_seed_vocab() if args.vocab == "builtin" else load_vocab(args.vocab)
    rows = generate_synthetic(vocab, args.n, args.max_len, args.seed)
    props_out = args.props_out or str(Path(args.out).with_suffix(".props.csv"))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"# molspan synthetic corpus | config {json.dumps(_resolved(args), sort_keys=True)}\n")
        for smi, _ in rows:
            fh.write(smi + "\n")
    with open(props_out, "w", encoding="utf-8") as fh:
        fh.write(",".join(SYNTH_PROPERTIES) + "\n")
        for _, props in rows:
            fh.write(",".join(str(props[k]) for k in SYNTH_PROPERTIES) + "\n")
    print(f"{args.n} molecules -> {args.out}; properties -> {props_out}")
    return 0


def _load_sized_corpus(args) -> tuple[Corpus, list[Example]]:
    corpus = load_corpus(args.data, args.props,
                         categorical=frozenset(args.categorical.split(","))
                         if getattr(args, "categorical", "") else frozenset())
    train_idx = split_corpus(corpus)["train"]
    return corpus, [corpus.examples[i] for i in train_idx]


def cmd_train(args) -> int:
    vocab = load_vocab(args.vocab)
    spec = load_spec(args.props_spec)
    if args.no_standardize:
        spec = PropertySpec(tuple(
            PropertyDef(p.name, "continuous", mean=0.0, std=1.0)
            if p.kind == "continuous" else p
            for p in spec.properties))
    corpus, train_examples = _load_sized_corpus(args)

    if args.max_len is None:
        lengths = [len(codec.encode(ex.graph, vocab)) for ex in train_examples]
        args.max_len = max(3, int(np.ceil(1.5 * max(lengths))))
    if args.lr is None:
        args.lr = 1e-3 if len(train_examples) >= 10_000 else 2.5e-4

    config = ModelConfig(
        vocab_size=len(vocab), n_ring_slots=vocab.r_max, max_len=args.max_len,
        d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads,
        dtype=args.dtype, legacy_arch=args.legacy_arch,
        prop_encoder_layers=1 if args.single_layer_prop_encoder else 2,
    )
    tc = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, warmup_steps=args.warmup_steps,
        seed=args.seed, lam_prop=0.0 if args.no_prop_loss else args.lam_prop,
        augment_random_order=not args.no_random_order,
        grad_clip=args.grad_clip,
    )
    params = init_params(config, spec, np.random.default_rng(args.seed))
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    with open(log_path, "w", encoding="utf-8") as log_file:
        log_file.write(json.dumps({"config": _resolved(args)}, sort_keys=True) + "\n")
        history = train(params, config, spec, vocab, train_examples, tc,
                        log_file=log_file)
    save_checkpoint(args.out, params, config, spec, vocab.digest(),
                    extra={"resolved": _resolved(args),
                           "final": history[-1] if history else {}})
    last = history[-1] if history else {}
    print(f"trained {tc.epochs} epochs on {len(train_examples)} molecules; "
          f"final token CE {last.get('token_ce', float('nan')):.4f} -> {args.out}")
    return 0


def _request_records(result) -> dict:
    def cand(c):
        return {"smiles": c.smiles, "predicted_props": c.predicted,
                "w": c.w, "self_score": c.self_score}

    return {"best": cand(result.best),
            "candidates": [cand(c) for c in result.candidates]}


def cmd_sample(args) -> int:
    vocab = load_vocab(args.vocab)
    params, config, spec, header = load_checkpoint(args.ckpt, vocab.digest())
    target = _parse_target(args.target)
    max_len = args.max_len or config.max_len
    w_uniform = tuple(args.w_uniform) if args.w_uniform else None
    request_seeds = np.random.SeedSequence(args.seed).generate_state(args.n)

    def run_request(i: int) -> dict:
        req = SampleRequest(target=target, k=args.k, w=args.w,
                            w_uniform=w_uniform, temperature=args.temperature,
                            max_len=max_len, seed=int(request_seeds[i]))
        result = sample_best_of_k(params, config, spec, vocab, req)
        rec = {"target": target, "k": args.k,
               "w_mode": (f"uniform({w_uniform[0]},{w_uniform[1]})"
                          if w_uniform else f"fixed({args.w})")}
        rec.update(_request_records(result))
        return rec

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            records = list(pool.map(run_request, range(args.n)))
    else:
        records = [run_request(i) for i in range(args.n)]

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": _resolved(args)}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"{args.n} requests (k={args.k}) -> {args.out}")
    return 0


def _read_sample_smiles(path: str) -> list[str]:
    """Accept a sampler JSONL (best.smiles per record) or a plain SMILES file."""
    smiles = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("{"):
                rec = json.loads(line)
                if "best" in rec:
                    smiles.append(rec["best"]["smiles"])
            else:
                smiles.append(line)
    return smiles


def cmd_evaluate(args) -> int:
    smiles = _read_sample_smiles(args.samples)
    if not smiles:
        raise DataError(f"{args.samples} contains no samples")
    samples = []
    for smi in smiles:
        try:
            samples.append(parse_smiles(smi))
        except SmilesError:
            samples.append(None)
    keys: set[str] = set()
    if args.train_data:
        ref = load_corpus(args.train_data)
        keys = train_keys([ex.graph for ex in ref.examples])
    targets = _parse_target(args.target) if args.target else None
    report = evaluation_report(samples, keys, targets)
    report["config"] = _resolved(args)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report -> {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_predict(args) -> int:
    from .sampling import self_predict_many

    vocab = load_vocab(args.vocab)
    params, config, spec, _ = load_checkpoint(args.ckpt, vocab.digest())
    corpus = load_corpus(args.data)
    seqs = [codec.encode(ex.graph, vocab) for ex in corpus.examples]
    preds = self_predict_many(params, config, spec, vocab, seqs)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": _resolved(args)}, sort_keys=True) + "\n")
        for smi, pred in zip(corpus.smiles, preds):
            fh.write(json.dumps({"smiles": smi, "predicted_props": pred},
                                sort_keys=True) + "\n")
    print(f"{len(preds)} predictions -> {args.out}")
    return 0


def cmd_encode(args) -> int:
    vocab = load_vocab(args.vocab)
    rng = np.random.default_rng(args.seed) if args.random_order else None
    g = parse_smiles(args.smiles)
    ids = codec.encode(g, vocab, rng=rng)
    print(codec.tokens_to_text(ids, vocab))
    return 0


def cmd_decode(args) -> int:
    vocab = load_vocab(args.vocab)
    ids = codec.text_to_tokens(args.tokens, vocab)
    g = codec.decode(ids, vocab)
    print(write_smiles(g))
    return 0


def cmd_roundtrip_check(args) -> int:
    corpus = load_corpus(args.data)
    graphs = [ex.graph for ex in corpus.examples]
    vocab = (load_vocab(args.vocab) if args.vocab
             else induce_vocab(graphs, r_max=args.r_max))
    rng = np.random.default_rng(args.seed)
    failures = 0
    total = 0
    for g in graphs:
        for _ in range(args.seeds):
            ids = codec.encode(g, vocab, rng=rng)
            back = codec.decode(ids, vocab)
            total += 1
            if not is_isomorphic(g, back):
                failures += 1
    print(f"{total} round trips over {len(graphs)} molecules: "
          f"{total - failures} ok, {failures} failed")
    if failures:
        raise MaskViolation("roundtrip", "-", 0,
                            f"{failures} round-trip failures")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="molspan",
                     description="Spanning-tree molecular sequence modeling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None,
                       help="JSON file of option defaults; flags override")

    p = sub.add_parser("build-vocab", help="induce vocabulary and property spec")
    p.add_argument("--data", required=True)
    p.add_argument("--props", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--props-out", default=None)
    p.add_argument("--r-max", type=int, default=100)
    p.add_argument("--categorical", default="",
                   help="comma-separated categorical column names")
    common(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--vocab", default="builtin",
                   help="seed vocabulary JSON, or 'builtin'")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--props-out", default=None)
    common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a conditional model")
    p.add_argument("--data", required=True)
    p.add_argument("--props", default=None)
    p.add_argument("--categorical", default="")
    p.add_argument("--vocab", required=True)
    p.add_argument("--props-spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=None,
                   help="default: 1e-3 for >=10k molecules, else 2.5e-4")
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--lam-prop", type=float, default=1.0)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--max-len", type=int, default=None,
                   help="default: 1.5x the longest encoded training sequence")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=3)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--legacy-arch", action="store_true",
                   help="LayerNorm + learned positions + GELU")
    p.add_argument("--no-random-order", action="store_true")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--no-prop-loss", action="store_true")
    p.add_argument("--single-layer-prop-encoder", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="conditionally sample molecules")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--target", default="",
                   help="e.g. molWt=350,ring_count=2 (absent = unconditional)")
    p.add_argument("--n", type=int, default=1, help="number of requests")
    p.add_argument("--k", type=int, default=1, help="candidates per request")
    p.add_argument("--w", type=float, default=1.5)
    p.add_argument("--w-uniform", nargs=2, type=float, default=None,
                   metavar=("LO", "HI"), help="random guidance range")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="compute generation metrics")
    p.add_argument("--samples", required=True,
                   help="sampler JSONL or plain SMILES file")
    p.add_argument("--train-data", default=None)
    p.add_argument("--target", default="", help="MinMAE targets, name=value")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="self-predict properties of molecules")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("encode", help="tokenize one SMILES")
    p.add_argument("--vocab", required=True)
    p.add_argument("--smiles", required=True)
    p.add_argument("--random-order", action="store_true")
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a token text back to SMILES")
    p.add_argument("--vocab", required=True)
    p.add_argument("--tokens", required=True)
    common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip-check",
                       help="encode/decode isomorphism check over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--r-max", type=int, default=100)
    p.add_argument("--seeds", type=int, default=20)
    common(p)
    p.set_defaults(func=cmd_roundtrip_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except INTERNAL_ERRORS as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
