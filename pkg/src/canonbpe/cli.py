"""Command-line surface: vocabulary checks, canonicality verdicts, sampling,
estimation, training, and bigram analysis, all reproducible under a seed.

Machine-readable records (one ``key=value ...`` line each) go to standard
output; human-readable commentary goes to standard error, so the two never
mix in one stream.  Every report opens with a config echo that includes the
seed.  A flat ``key=value`` config file can supply any flag's default; flags
given on the command line win.

Exit codes: 0 success, 1 operational error, 2 validation findings.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, conditioning, construction, gpt2
from .bpe import Vocabulary, load_vocabulary
from .canonical import CanonicalityOracle, load_overrides, validate_vocabulary
from .escape import escape_bytes, unescape_bytes
from .lm import NGramLM, train_ngram


class CommandError(RuntimeError):
    """Operational failure inside a command (maps to exit code 1)."""


@dataclass
class RunConfig:
    """Resolved run settings; echoed into every report."""

    merges: str | None = None
    gpt2: bool = False
    base: str = "0-255"
    overrides: str | None = None
    corpus: str | None = None
    model: str | None = None
    out: str | None = None
    seed: int = 0
    max_len: int = 256
    samples: int = 1000
    order: int = 2
    alpha: float = 0.1
    lam: float = 0.01
    learning_rate: float = 0.1
    steps: int = 100
    batch: int = 8
    workers: int = 1

    def echo(self) -> str:
        pairs = [f"{key}={value}" for key, value in vars(self).items() if value is not None]
        return " ".join(pairs)


def _parse_base(spec: str) -> list[int]:
    """Byte alphabet spec: ``lo-hi`` range, comma-separated values, or
    ``text:<chars>`` for literal single-byte characters."""
    if spec.startswith("text:"):
        raw = spec[5:].encode("utf-8")
        return list(dict.fromkeys(raw))
    if "-" in spec and "," not in spec:
        lo, hi = spec.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in spec.split(",")]


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    if cfg.gpt2:
        return gpt2.load_gpt2_vocabulary()
    if not cfg.merges:
        raise CommandError("need --merges PATH or --gpt2")
    text = Path(cfg.merges).read_text(encoding="utf-8")
    return load_vocabulary(text, base_alphabet=_parse_base(cfg.base))


def _load_oracle(cfg: RunConfig, vocab: Vocabulary) -> CanonicalityOracle:
    overrides = None
    if cfg.overrides:
        overrides = load_overrides(Path(cfg.overrides).read_text(encoding="utf-8"), vocab)
    return CanonicalityOracle(vocab, overrides=overrides)


def _load_model(cfg: RunConfig, vocab: Vocabulary) -> NGramLM:
    if not cfg.model:
        raise CommandError("need --model PATH")
    return NGramLM.from_text(Path(cfg.model).read_text(encoding="utf-8"), vocab)


def _read_corpus(path: str, vocab: Vocabulary) -> list[list[int]]:
    """One document per line, UTF-8; encoded before use."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [vocab.encode(line.encode("utf-8")) for line in lines]


def _spawn_rngs(seed: int, workers: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(workers)]


def _split_count(total: int, workers: int) -> list[int]:
    each, extra = divmod(total, workers)
    return [each + (1 if i < extra else 0) for i in range(workers)]


# -- commands -------------------------------------------------------------


def _cmd_vocab(cfg: RunConfig, action: str, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    excluded: list[int] = []
    if action == "validate":
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            excluded = validate_vocabulary(vocab)
    if action == "load" and cfg.out:
        Path(cfg.out).write_text(vocab.token_map_text(), encoding="utf-8")
    print(f"record=config command=vocab action={action} {cfg.echo()}", file=stdout)
    print(
        f"record=vocab tokens={len(vocab)} merges={len(vocab.merges)} excluded={len(excluded)}",
        file=stdout,
    )
    for token_id in excluded:
        print(f"record=excluded id={token_id} subword={escape_bytes(vocab.subword(token_id))}", file=stdout)
    print(f"{len(vocab)} tokens, {len(vocab.merges)} merges, {len(excluded)} excluded", file=stderr)
    return 2 if excluded else 0


def _parse_check_line(line: str, vocab: Vocabulary, fmt: str) -> list[int]:
    fields = line.split()
    if fmt == "ids":
        return [int(f) for f in fields]
    return [vocab.token_id(unescape_bytes(f)) for f in fields]


def _cmd_check(cfg: RunConfig, mode: str, fmt: str, lines: list[str], stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    print(f"record=config command=check mode={mode} format={fmt} {cfg.echo()}", file=stdout)
    had_errors = False
    for line in lines:
        try:
            tokens = _parse_check_line(line, vocab, fmt)
            for token in tokens:
                vocab.subword(token)
        except Exception as exc:
            print(f"record=verdict error={str(exc)!r}", file=stdout)
            had_errors = True
            continue
        verdicts = {}
        if mode in ("roundtrip", "all"):
            verdicts["roundtrip"] = vocab.canonicalize(tokens) == tokens
        if mode in ("bigram", "all"):
            verdicts["bigram"] = oracle.is_canonical(tokens)
        conflict_text = ""
        if mode in ("conflict", "all"):
            ok = True
            for i in range(len(tokens) - 1):
                found = oracle.find_conflict(tokens[i], tokens[i + 1])
                if found is not None:
                    ok = False
                    conflict_text = found.render()
                    break
            verdicts["conflict"] = ok
        if len(set(verdicts.values())) > 1:
            raise AssertionError(f"canonicality modes disagree on {line!r}: {verdicts}")
        canonical = next(iter(verdicts.values()))
        word = "CANONICAL" if canonical else "NONCANONICAL"
        suffix = f" {conflict_text}" if conflict_text and not canonical else ""
        print(f"record=verdict canonical={int(canonical)} verdict={word}{suffix}", file=stdout)
    return 2 if had_errors else 0


def _cmd_sample(cfg: RunConfig, method: str, n: int, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    model = _load_model(cfg, vocab)
    local = conditioning.LocalModel(model, oracle)
    print(f"record=config command=sample method={method} n={n} {cfg.echo()}", file=stdout)
    rngs = _spawn_rngs(cfg.seed, cfg.workers)
    counts = _split_count(n, cfg.workers)

    def run_local(worker: int) -> list[str]:
        out = []
        for _ in range(counts[worker]):
            s = conditioning.sample_local(local, rngs[worker], max_len=cfg.max_len)
            tokens = ",".join(str(t) for t in s.tokens)
            text = escape_bytes(vocab.decode(s.tokens))
            out.append(
                f"record=sample worker={worker} tokens={tokens} text={text} "
                f"log_weight={s.log_weight!r} truncated={int(s.truncated)}"
            )
        return out

    def run_rejection(worker: int) -> list[str]:
        samples, attempts = conditioning.rejection_sample_many(
            model, oracle, rngs[worker], counts[worker], max_len=cfg.max_len
        )
        out = [
            f"record=sample worker={worker} tokens={','.join(str(t) for t in s)} "
            f"text={escape_bytes(vocab.decode(s))}"
            for s in samples
        ]
        out.append(f"record=rejection_stats worker={worker} accepted={len(samples)} attempts={attempts}")
        return out

    runner = run_local if method == "local" else run_rejection
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        chunks = list(pool.map(runner, range(cfg.workers)))
    for chunk in chunks:  # deterministic: merged in worker order
        for line in chunk:
            print(line, file=stdout)
    return 0


def _cmd_estimate_z(cfg: RunConfig, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    model = _load_model(cfg, vocab)
    local = conditioning.LocalModel(model, oracle)
    print(f"record=config command=estimate-z {cfg.echo()}", file=stdout)
    rngs = _spawn_rngs(cfg.seed, cfg.workers)
    counts = _split_count(cfg.samples, cfg.workers)

    def run(worker: int):
        weights = []
        truncated = 0
        for _ in range(counts[worker]):
            s = conditioning.sample_local(local, rngs[worker], max_len=cfg.max_len)
            if s.truncated:
                truncated += 1
                continue
            weights.append(s.weight)
        return weights, truncated

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(run, range(cfg.workers)))
    weights = np.array([w for part, _ in parts for w in part])
    truncated = sum(t for _, t in parts)
    mean = float(weights.mean())
    stderr_val = float(weights.std(ddof=1) / np.sqrt(len(weights)))
    print(
        f"record=z_estimate z_estimate={mean!r} z_stderr={stderr_val!r} "
        f"samples={len(weights)} seed={cfg.seed} max_len={cfg.max_len} truncated_count={truncated}",
        file=stdout,
    )
    print(f"Z ~ {mean:.6g} (stderr {stderr_val:.3g}, {len(weights)} samples)", file=stderr)
    return 0


def _cmd_eval(cfg: RunConfig, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    model = _load_model(cfg, vocab)
    local = conditioning.LocalModel(model, oracle)
    if not cfg.corpus:
        raise CommandError("need --corpus PATH")
    corpus = _read_corpus(cfg.corpus, vocab)
    print(f"record=config command=eval {cfg.echo()}", file=stdout)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    z = conditioning.estimate_Z(local, rng, cfg.samples, max_len=cfg.max_len)
    report = conditioning.logloss_eval(corpus, model, local, z)
    for method, bits in (
        ("baseline", report.baseline_bits),
        ("local", report.local_bits),
        ("global", report.global_bits),
    ):
        print(
            f"record=logloss method={method} bits_per_string={bits!r} "
            f"z_estimate={z.mean!r} z_stderr={z.standard_error!r} samples={z.sample_count} "
            f"seed={cfg.seed} max_len={cfg.max_len} truncated_count={z.truncated}",
            file=stdout,
        )
    print(f"{'method':<10} {'bits/string':>12}", file=stderr)
    for method, bits in (
        ("baseline", report.baseline_bits),
        ("local", report.local_bits),
        ("global", report.global_bits),
    ):
        print(f"{method:<10} {bits:>12.4f}", file=stderr)
    print(
        f"({report.strings_evaluated} strings evaluated, "
        f"{report.skipped_noncanonical} noncanonical skipped)",
        file=stderr,
    )
    return 0


def _cmd_train(cfg: RunConfig, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    if not cfg.corpus:
        raise CommandError("need --corpus PATH")
    corpus = _read_corpus(cfg.corpus, vocab)
    model = train_ngram(corpus, cfg.order, cfg.alpha, vocab)
    if not cfg.out:
        raise CommandError("need --out PATH for the model file")
    Path(cfg.out).write_text(model.to_text(), encoding="utf-8")
    print(f"record=config command=train {cfg.echo()}", file=stdout)
    print(
        f"record=train strings={len(corpus)} contexts={len(model.counts)} out={cfg.out}",
        file=stdout,
    )
    return 0


def _cmd_finetune(cfg: RunConfig, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    if not cfg.corpus:
        raise CommandError("need --corpus PATH")
    corpus = _read_corpus(cfg.corpus, vocab)
    ngram = train_ngram(corpus, cfg.order, cfg.alpha, vocab)
    base = construction.TabularLogitLM.from_ngram(ngram)
    frozen = base.copy()
    arch = construction.CanonicalizedArchitecture(base, oracle)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    trace = construction.finetune(
        arch,
        corpus,
        frozen,
        cfg.lam,
        cfg.steps,
        cfg.learning_rate,
        batch_size=cfg.batch,
        rng=rng,
        kl_max_len=min(cfg.max_len, 12),
    )
    print(f"record=config command=finetune {cfg.echo()}", file=stdout)
    for record in trace:
        print(
            f"record=trace step={record.step} term={record.term} "
            f"objective_estimate={record.objective!r} grad_norm={record.grad_norm!r} seed={cfg.seed}",
            file=stdout,
        )
    final = construction.log_loss(arch, corpus)
    print(f"record=finetune final_train_bits={final!r}", file=stdout)
    print(f"final train log-loss: {final:.4f} bits/string", file=stderr)
    return 0


def _cmd_analyze(cfg: RunConfig, estimator: str, top_k: int, stdout, stderr) -> int:
    vocab = _load_vocab(cfg)
    oracle = _load_oracle(cfg, vocab)
    model = _load_model(cfg, vocab)
    print(f"record=config command=analyze estimator={estimator} top={top_k} {cfg.echo()}", file=stdout)
    if estimator == "exact":
        table = analysis.exact_bigram_freq(model, max_len=cfg.max_len)
    else:
        rngs = _spawn_rngs(cfg.seed, cfg.workers)
        counts = _split_count(cfg.samples, cfg.workers)
        func = analysis.bigram_freq_mc if estimator == "mc" else analysis.bigram_freq_rb

        def run(worker: int):
            return func(model, rngs[worker], counts[worker], max_len=cfg.max_len, seed=cfg.seed)

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            tables = list(pool.map(run, range(cfg.workers)))
        table = analysis.merge_tables(tables)
    entries = analysis.report_noncanonical(table, oracle, top_k)
    for entry in entries:
        print(
            f"record=noncanonical rank={entry.rank} left={escape_bytes(entry.left)} "
            f"right={escape_bytes(entry.right)} estimate={entry.estimate:.2e} seed={cfg.seed}",
            file=stdout,
        )
    print(f"{len(entries)} noncanonical bigrams reported ({estimator})", file=stderr)
    return 0


# -- argument plumbing ------------------------------------------------------


_CONFIG_KEYS = RunConfig.__dataclass_fields__.keys()


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SystemExit(f"config line {line_no}: expected key=value")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise SystemExit(f"config line {line_no}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file; flags override it")
    parser.add_argument("--merges", help="merge-list file [config: merges]")
    parser.add_argument("--gpt2", action="store_true", default=None, help="use the packaged GPT-2 merges [config: gpt2]")
    parser.add_argument("--base", help="byte alphabet: lo-hi, csv, or text:<chars> [config: base]")
    parser.add_argument("--overrides", help="override file [config: overrides]")
    parser.add_argument("--model", help="trained model file [config: model]")
    parser.add_argument("--corpus", help="corpus file, one document per line [config: corpus]")
    parser.add_argument("--out", help="output path [config: out]")
    parser.add_argument("--seed", type=int, help="random seed [config: seed]")
    parser.add_argument("--max-len", dest="max_len", type=int, help="length cap for sampling/enumeration [config: max_len]")
    parser.add_argument("--samples", type=int, help="sample count [config: samples]")
    parser.add_argument("--order", type=int, help="n-gram/logit model order [config: order]")
    parser.add_argument("--alpha", type=float, help="additive smoothing constant [config: alpha]")
    parser.add_argument("--lam", type=float, help="regularizer mixing weight [config: lam]")
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, help="SGD step size [config: learning_rate]")
    parser.add_argument("--steps", type=int, help="training steps [config: steps]")
    parser.add_argument("--batch", type=int, help="minibatch size [config: batch]")
    parser.add_argument("--workers", type=int, help="parallel sampling workers [config: workers]")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonbpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vocab", help="load or validate a vocabulary")
    p.add_argument("action", choices=["load", "validate"])
    _add_common(p)

    p = sub.add_parser("check", help="canonicality verdicts for token strings")
    p.add_argument("--mode", choices=["roundtrip", "bigram", "conflict", "all"], default="all")
    p.add_argument("--format", choices=["yields", "ids"], default="yields")
    p.add_argument("--input", help="file of one token string per line (default: stdin)")
    _add_common(p)

    p = sub.add_parser("sample", help="draw canonical samples")
    p.add_argument("--method", choices=["local", "rejection"], default="local")
    p.add_argument("--n", type=int, default=10)
    _add_common(p)

    p = sub.add_parser("estimate-z", help="importance-sampling canonicality rate")
    _add_common(p)

    p = sub.add_parser("eval", help="baseline/local/global log-loss on a corpus")
    _add_common(p)

    p = sub.add_parser("train", help="fit a smoothed n-gram on a text corpus")
    _add_common(p)

    p = sub.add_parser("finetune", help="train the masked architecture")
    _add_common(p)

    p = sub.add_parser("analyze", help="noncanonical bigram frequency report")
    p.add_argument("--estimator", choices=["mc", "rb", "exact"], default="rb")
    p.add_argument("--top", type=int, default=20)
    _add_common(p)

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, raw.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(raw))
            elif isinstance(current, float):
                setattr(cfg, key, float(raw))
            else:
                setattr(cfg, key, raw)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def main(argv: list[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    args = _build_parser().parse_args(argv)
    cfg = _resolve_config(args)
    try:
        if args.command == "vocab":
            return _cmd_vocab(cfg, args.action, stdout, stderr)
        if args.command == "check":
            if args.input:
                lines = Path(args.input).read_text(encoding="utf-8").splitlines()
            else:
                lines = sys.stdin.read().splitlines()
            return _cmd_check(cfg, args.mode, args.format, lines, stdout, stderr)
        if args.command == "sample":
            return _cmd_sample(cfg, args.method, args.n, stdout, stderr)
        if args.command == "estimate-z":
            return _cmd_estimate_z(cfg, stdout, stderr)
        if args.command == "eval":
            return _cmd_eval(cfg, stdout, stderr)
        if args.command == "train":
            return _cmd_train(cfg, stdout, stderr)
        if args.command == "finetune":
            return _cmd_finetune(cfg, stdout, stderr)
        if args.command == "analyze":
            return _cmd_analyze(cfg, args.estimator, args.top, stdout, stderr)
        raise SystemExit(f"unknown command {args.command!r}")
    except SystemExit:
        raise
    except BrokenPipeError:
        return 1
    except Exception as exc:  # operational errors map to exit 1 with context
        print(f"canonbpe {args.command}: error: {exc}", file=stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
