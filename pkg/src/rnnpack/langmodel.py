"""Corpus handling, vocabulary, training, and perplexity evaluation.

Text is PTB-shaped: whitespace-tokenized, one sentence per line, with a
literal ``<unk>`` respected and ``<eos>`` appended to every line at
load.  Training runs on the concatenated token stream split into
``batch_size`` contiguous sub-streams, each carrying its recurrent
state across unroll windows (truncated backpropagation through time).

The training loop has two stages, adaptive then plain: Adam first, then
gradient descent with a per-epoch learning-rate decay.  Validation
perplexity is recorded every epoch, early stopping triggers after
``patience`` epochs without improvement, and the best checkpoint seen
is always the one returned.  Hyperparameter defaults are desk-scale
choices, not tuned claims.

Evaluation is per line: each line is scored independently from a fresh
state with ``<eos>`` as the opening input and as the final target.
That makes the total log-loss a sum of independent line terms, so it
can fan out across threads with an order-independent reduction.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import cells, numkit
from .errors import ParameterError

UNK = "<unk>"
EOS = "<eos>"


class Vocabulary:
    """Token ids with ``<unk>`` and ``<eos>`` pinned to ids 0 and 1."""

    def __init__(self, tokens):
        self.id_to_token = [UNK, EOS]
        for tok in tokens:
            if tok in (UNK, EOS):
                raise ParameterError(f"{tok!r} is reserved")
            self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ParameterError("vocabulary tokens must be distinct")

    unk_id = 0
    eos_id = 1

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens):
        """Ids for a token sequence; unknown tokens map to ``unk_id``."""
        get = self.token_to_id.get
        return np.array([get(t, self.unk_id) for t in tokens], dtype=np.intp)

    def decode(self, ids):
        return [self.id_to_token[int(i)] for i in ids]


def _as_token_lines(text):
    if isinstance(text, str):
        lines = [line.split() for line in text.splitlines()]
    else:
        lines = [list(line) for line in text]
    return [line for line in lines if line]


def build_vocab(text, max_size=None):
    """Frequency-then-lexicographic vocabulary over PTB-style text.

    ``text`` is a string or an iterable of token lists.  ``max_size``
    bounds the total size including the two specials; the tail reads
    back as ``<unk>``.
    """
    lines = _as_token_lines(text)
    counts = {}
    for line in lines:
        for tok in line:
            if tok not in (UNK, EOS):
                counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise ParameterError("cannot build a vocabulary from empty text")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        if max_size < 3:
            raise ParameterError("max_size must leave room beyond the specials")
        ordered = ordered[: max_size - 2]
    return Vocabulary(ordered)


def read_token_lines(path):
    with open(path, encoding="utf-8") as handle:
        return _as_token_lines(handle.read())


@dataclass
class Corpus:
    """Encoded splits; each split is a list of per-line id arrays."""

    vocab: Vocabulary
    splits: dict

    def __post_init__(self):
        limit = len(self.vocab)
        for name, lines in self.splits.items():
            for line in lines:
                if line.size and line.max() >= limit:
                    raise ParameterError(f"{name} split contains out-of-range ids")

    def lines(self, split):
        if split not in self.splits:
            raise ParameterError(f"corpus has no {split!r} split")
        return self.splits[split]

    def stream(self, split):
        """One flat id array with ``<eos>`` closing every line."""
        eos = np.array([self.vocab.eos_id], dtype=np.intp)
        parts = []
        for line in self.lines(split):
            parts.append(line)
            parts.append(eos)
        if not parts:
            return np.zeros(0, dtype=np.intp)
        return np.concatenate(parts)

    def token_count(self, split):
        return sum(line.size + 1 for line in self.lines(split))


def load_corpus(train_path, valid_path=None, test_path=None, max_size=None):
    """Corpus from text files; the vocabulary comes from the train split."""
    train_lines = read_token_lines(train_path)
    if not train_lines:
        raise ParameterError(f"{train_path} contains no sentences")
    vocab = build_vocab(train_lines, max_size=max_size)
    splits = {"train": [vocab.encode(line) for line in train_lines]}
    for name, path in (("valid", valid_path), ("test", test_path)):
        if path is not None:
            splits[name] = [vocab.encode(line) for line in read_token_lines(path)]
    return Corpus(vocab, splits)


def fixture_paths():
    """Paths of the bundled desk-scale corpus."""
    base = resources.files("rnnpack") / "data"
    return {name: base / f"fixture.{name}.txt" for name in ("train", "valid", "test")}


def load_fixture(max_size=None):
    paths = fixture_paths()
    return load_corpus(
        paths["train"], paths["valid"], paths["test"], max_size=max_size
    )


# ---------------------------------------------------------------------------
# evaluation


def _line_loss(model, line, eos_id, window):
    ids = np.concatenate([[eos_id], line]).astype(np.intp)
    targets = np.concatenate([line, [eos_id]]).astype(np.intp)
    total = 0.0
    state = None
    for start in range(0, ids.size, window):
        stop = min(start + window, ids.size)
        probs, state, _ = cells.forward_sequence(
            model, ids[start:stop], state=state, want_cache=False
        )
        total += cells.sequence_loss(probs, targets[start:stop]) * (stop - start)
    return total, ids.size


def evaluate_loss(model, lines, eos_id, window=128):
    """Summed per-line cross-entropy in nats and the token count."""
    loss = 0.0
    count = 0
    for line in lines:
        part, n = _line_loss(model, line, eos_id, window)
        loss += part
        count += n
    return loss, count


def perplexity(model, lines, eos_id=1, window=128, threads=None):
    """exp(mean per-token cross-entropy) over per-line evaluation."""
    lines = list(lines)
    if not lines:
        raise ParameterError("cannot evaluate an empty split")
    if threads is None or threads <= 1 or len(lines) < 2:
        loss, count = evaluate_loss(model, lines, eos_id, window)
    else:
        chunks = np.array_split(np.arange(len(lines)), min(threads, len(lines)))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    evaluate_loss, model, [lines[i] for i in idx], eos_id, window
                )
                for idx in chunks
                if idx.size
            ]
            # summed in submission order: independent of completion order
            parts = [f.result() for f in futures]
        loss = sum(p[0] for p in parts)
        count = sum(p[1] for p in parts)
    return float(math.exp(loss / count))


def word_accuracy(ppl):
    """Expected fraction of correct guesses for a model at this
    perplexity: one divided by it."""
    ppl = float(ppl)
    if ppl <= 0.0 or not math.isfinite(ppl):
        raise ParameterError("perplexity must be positive and finite")
    return 1.0 / ppl


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    stage1_lr: float = 2e-3
    stage1_epochs: int = 6
    stage2_lr: float = 0.5
    stage2_decay: float = 0.8
    stage2_epochs: int = 8
    batch_size: int = 4
    unroll: int = 32
    dropout: float = 0.0
    clip_norm: float = 5.0
    patience: int = 2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        positive = {
            "stage1_lr": self.stage1_lr,
            "stage2_lr": self.stage2_lr,
            "stage2_decay": self.stage2_decay,
            "batch_size": self.batch_size,
            "unroll": self.unroll,
            "patience": self.patience,
            "adam_eps": self.adam_eps,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ParameterError("epoch counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ParameterError("clip_norm must be non-negative")
        if not 0.0 < self.adam_beta1 < 1.0 or not 0.0 < self.adam_beta2 < 1.0:
            raise ParameterError("Adam betas must lie in (0, 1)")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    stage_switch: int = 0
    best_valid: float = math.inf
    aborted: bool = False
    abort_reason: str = ""

    def final(self, key):
        if not self.history:
            raise ParameterError("no epochs were run")
        return self.history[-1][key]


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, arr in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for name, arr in self.params.items():
            arr -= self.lr * grads[name]


def clip_gradients(grads, max_norm):
    """Scale all gradients so the global norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _make_streams(flat, batch_size):
    usable = flat.size // batch_size
    if usable < 2:
        raise ParameterError("train split too small for this batch size")
    return flat[: usable * batch_size].reshape(batch_size, usable)


def _run_epoch(model, streams, config, rng, opt, post_update):
    T = config.unroll
    length = streams.shape[1]
    states = [model.init_state() for _ in range(streams.shape[0])]
    loss_sum = 0.0
    tokens = 0
    pos = 0
    while pos + 1 < length:
        stop = min(pos + T, length - 1)
        acc = None
        for b in range(streams.shape[0]):
            ids = streams[b, pos : stop]
            targets = streams[b, pos + 1 : stop + 1]
            probs, states[b], cache = cells.forward_sequence(
                model, ids, state=states[b], dropout=config.dropout, rng=rng
            )
            grads = cells.backward_sequence(model, cache, targets)
            loss = cells.sequence_loss(probs, targets)
            loss_sum += loss * targets.size
            tokens += targets.size
            if acc is None:
                acc = grads
            else:
                for name in acc:
                    acc[name] += grads[name]
        if not math.isfinite(loss_sum):
            return math.nan
        if streams.shape[0] > 1:
            for name in acc:
                acc[name] /= streams.shape[0]
        clip_gradients(acc, config.clip_norm)
        opt.step(acc)
        if post_update is not None:
            post_update()
        pos = stop
    return loss_sum / tokens


def train_model(model, corpus, config, post_update=None):
    """Two-stage training (adaptive, then plain gradient descent with
    learning-rate decay).  Returns the epoch history; the model is left
    holding the best validation checkpoint seen.  A non-finite loss
    aborts the run and restores that checkpoint."""
    rng = numkit.make_rng(config.seed)
    params = model.param_arrays()
    streams = _make_streams(corpus.stream("train"), config.batch_size)
    valid = corpus.splits.get("valid")
    result = TrainResult()
    best = {n: a.copy() for n, a in params.items()}
    best_valid = math.inf

    def restore_best():
        for name, arr in params.items():
            arr[:] = best[name]

    stages = (
        ("adam", config.stage1_epochs, config.stage1_lr),
        ("sgd", config.stage2_epochs, config.stage2_lr),
    )
    for stage_no, (kind, epochs, lr) in enumerate(stages, start=1):
        if kind == "adam":
            opt = _Adam(
                params, lr, config.adam_beta1, config.adam_beta2, config.adam_eps
            )
        else:
            opt = _Sgd(params, lr)
        since_best = 0
        for epoch in range(epochs):
            mean_loss = _run_epoch(model, streams, config, rng, opt, post_update)
            if not math.isfinite(mean_loss):
                restore_best()
                result.aborted = True
                result.abort_reason = (
                    f"non-finite training loss in stage {stage_no} epoch {epoch}"
                )
                result.best_valid = best_valid
                return result
            record = {
                "stage": stage_no,
                "epoch": epoch,
                "lr": opt.lr,
                "train_ppl": float(math.exp(mean_loss)),
                "valid_ppl": None,
            }
            if valid is not None:
                record["valid_ppl"] = perplexity(
                    model, valid, eos_id=corpus.vocab.eos_id
                )
            result.history.append(record)
            if valid is not None:
                if record["valid_ppl"] < best_valid:
                    best_valid = record["valid_ppl"]
                    best = {n: a.copy() for n, a in params.items()}
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        break
            if kind == "sgd":
                opt.lr *= config.stage2_decay
        if valid is not None:
            restore_best()
            if post_update is not None:
                post_update()
        if stage_no == 1:
            result.stage_switch = len(result.history)
    result.best_valid = best_valid
    return result
