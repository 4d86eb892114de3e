"""Dataset schema, tokenization, JSONL loading, and a synthetic generator.

The JSONL interchange format is one object per line:

    {"text": "...", "concepts": {"Food": "Positive", ...}, "label": 3}

An optional ``"debug"`` object is tolerated (the synthetic generator uses it
to record whether the task label was noise-flipped and what the underlying
label rule produced), and round-trips unchanged through load/save.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    def __post_init__(self):
        if self.token_to_id.get(PAD_TOKEN) != PAD_ID or self.token_to_id.get(UNK_TOKEN) != UNK_ID:
            raise DataError("vocabulary must reserve id 0 for PAD and 1 for UNK")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise DataError("vocabulary ids must be dense in [0, |V|)")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def tokens_by_id(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in sorted(set(tokens) - {PAD_TOKEN, UNK_TOKEN}):
            mapping[tok] = len(mapping)
        return cls(mapping)


@dataclass
class DatasetSchema:
    concept_names: list[str]
    concept_class_names: list[str]
    task_class_count: int
    max_len: int

    def __post_init__(self):
        if len(self.concept_names) < 1:
            raise ConfigError("need at least one concept")
        if len(self.concept_class_names) < 2:
            raise ConfigError("concepts need at least two classes")
        if self.task_class_count < 2:
            raise ConfigError("need at least two task classes")
        if self.max_len < 1:
            raise ConfigError("max_len must be at least 1")

    @property
    def n_concepts(self) -> int:
        return len(self.concept_names)

    @property
    def n_concept_classes(self) -> int:
        return len(self.concept_class_names)

    def to_dict(self) -> dict:
        return {
            "concept_names": list(self.concept_names),
            "concept_class_names": list(self.concept_class_names),
            "task_class_count": self.task_class_count,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        try:
            return cls(
                concept_names=list(d["concept_names"]),
                concept_class_names=list(d["concept_class_names"]),
                task_class_count=int(d["task_class_count"]),
                max_len=int(d["max_len"]),
            )
        except KeyError as exc:
            raise DataError(f"schema missing field {exc}") from exc


@dataclass
class Example:
    token_ids: np.ndarray
    concept_labels: np.ndarray
    task_label: int
    text: str = ""
    debug: dict | None = None


@dataclass
class Split:
    examples: list[Example]
    schema: DatasetSchema

    def __len__(self) -> int:
        return len(self.examples)

    def concept_matrix(self) -> np.ndarray:
        return np.array([ex.concept_labels for ex in self.examples], dtype=np.int64)

    def task_labels(self) -> np.ndarray:
        return np.array([ex.task_label for ex in self.examples], dtype=np.int64)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Lowercase, split on whitespace/punctuation, map to ids, truncate tail."""
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    toks = _TOKEN_RE.findall(text.lower())[:max_len]
    return np.array([vocab.id_of(t) for t in toks], dtype=np.int64)


def token_counts(split: Split, vocab_size: int):
    """Per-example token count matrix and lengths for pooled encoding.

    Empty examples are represented as a single PAD token so that mean
    pooling degrades to the PAD embedding.
    """
    counts = np.zeros((len(split.examples), vocab_size), dtype=np.float64)
    lengths = np.zeros(len(split.examples), dtype=np.float64)
    for i, ex in enumerate(split.examples):
        if len(ex.token_ids) == 0:
            counts[i, PAD_ID] = 1.0
            lengths[i] = 1.0
        else:
            np.add.at(counts[i], ex.token_ids, 1.0)
            lengths[i] = len(ex.token_ids)
    return counts, lengths


def load_jsonl(path, schema: DatasetSchema, vocab: Vocabulary) -> Split:
    """Load and validate one JSONL split, tokenizing with ``vocab``."""
    class_index = {name: i for i, name in enumerate(schema.concept_class_names)}
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if "text" not in obj or not isinstance(obj["text"], str):
                raise DataError(f"{path}:{lineno}: missing or non-string 'text'")
            if "label" not in obj:
                raise DataError(f"{path}:{lineno}: missing 'label'")
            if "concepts" not in obj or not isinstance(obj["concepts"], dict):
                raise DataError(f"{path}:{lineno}: missing 'concepts' object")
            label = obj["label"]
            if not isinstance(label, int) or isinstance(label, bool):
                raise DataError(f"{path}:{lineno}: 'label' must be an integer")
            if not 0 <= label < schema.task_class_count:
                raise DataError(
                    f"{path}:{lineno}: label {label} outside [0, {schema.task_class_count})"
                )
            concepts = obj["concepts"]
            for name in concepts:
                if name not in schema.concept_names:
                    raise DataError(f"{path}:{lineno}: unknown concept name {name!r}")
            concept_labels = np.zeros(schema.n_concepts, dtype=np.int64)
            for k, name in enumerate(schema.concept_names):
                if name not in concepts:
                    raise DataError(f"{path}:{lineno}: missing concept {name!r}")
                cls_name = concepts[name]
                if cls_name not in class_index:
                    raise DataError(
                        f"{path}:{lineno}: unknown class {cls_name!r} for concept {name!r}"
                    )
                concept_labels[k] = class_index[cls_name]
            examples.append(
                Example(
                    token_ids=tokenize(obj["text"], vocab, schema.max_len),
                    concept_labels=concept_labels,
                    task_label=label,
                    text=obj["text"],
                    debug=obj.get("debug"),
                )
            )
    return Split(examples=examples, schema=schema)


def example_to_json(ex: Example, schema: DatasetSchema) -> str:
    obj = {
        "text": ex.text,
        "concepts": {
            name: schema.concept_class_names[ex.concept_labels[k]]
            for k, name in enumerate(schema.concept_names)
        },
        "label": int(ex.task_label),
    }
    if ex.debug is not None:
        obj["debug"] = ex.debug
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_jsonl(split: Split, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in split.examples:
            fh.write(example_to_json(ex, split.schema) + "\n")


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab.token_to_id, fh, ensure_ascii=False, sort_keys=True, indent=0)
        fh.write("\n")


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise DataError(f"{path}: vocab must be a JSON object")
    return Vocabulary({str(k): int(v) for k, v in mapping.items()})


def save_schema(schema: DatasetSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def load_schema(path) -> DatasetSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetSchema.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Synthetic review-style generator
# ---------------------------------------------------------------------------

# Scaffold sentences take one polarity adjective each. Adjectives are unique
# per (concept, polarity, pool); scaffold nouns identify the concept and are
# shared across polarities so that class evidence rides on the adjective.
# Pool A is the training pool; pool B is a disjoint paraphrase pool used by
# shifted splits to induce concept mispredictions.
_ROSTER = [
    "Food",
    "Ambiance",
    "Service",
    "Noise",
    "Acting",
    "Storyline",
    "Emotion",
    "Cinematography",
]

_SCAFFOLDS = {
    "Food": [
        "the food was {}",
        "the meal tasted {}",
        "{} flavors throughout",
        "a very {} dinner",
    ],
    "Ambiance": [
        "the ambiance felt {}",
        "the decor looked {}",
        "{} atmosphere inside",
        "such a {} vibe",
    ],
    "Service": [
        "the service was {}",
        "our waiter seemed {}",
        "{} staff at the counter",
        "they treated us in a {} way",
    ],
    "Noise": [
        "the noise level stayed {}",
        "the room sounded {}",
        "a {} hum all evening",
        "conversations felt {} there",
    ],
    "Acting": [
        "the acting was {}",
        "the cast performed in a {} manner",
        "{} performances on screen",
        "the lead actor felt {}",
    ],
    "Storyline": [
        "the storyline was {}",
        "the plot unfolded in a {} way",
        "a {} narrative arc",
        "the script read {}",
    ],
    "Emotion": [
        "the emotion came across {}",
        "it left me feeling {}",
        "a {} emotional core",
        "the tone struck me as {}",
    ],
    "Cinematography": [
        "the cinematography looked {}",
        "the camera work felt {}",
        "{} shots throughout the film",
        "visually the film seemed {}",
    ],
}

# adjectives[concept][class_name] -> (pool_a, pool_b)
_ADJECTIVES = {
    "Food": {
        "Positive": (
            ["delicious", "tasty", "wonderful", "flavorful"],
            ["scrumptious", "divine", "exquisite", "appetizing"],
        ),
        "Negative": (
            ["awful", "bland", "stale", "greasy"],
            ["revolting", "rancid", "soggy", "inedible"],
        ),
    },
    "Ambiance": {
        "Positive": (
            ["cozy", "charming", "elegant", "lovely"],
            ["enchanting", "serene", "stylish", "inviting"],
        ),
        "Negative": (
            ["dreary", "cramped", "tacky", "gloomy"],
            ["dingy", "sterile", "garish", "bleak"],
        ),
    },
    "Service": {
        "Positive": (
            ["friendly", "attentive", "prompt", "courteous"],
            ["gracious", "swift", "welcoming", "thoughtful"],
        ),
        "Negative": (
            ["rude", "slow", "dismissive", "careless"],
            ["hostile", "sloppy", "indifferent", "surly"],
        ),
    },
    "Noise": {
        "Positive": (
            ["quiet", "peaceful", "hushed", "calm"],
            ["tranquil", "muted", "mellow", "soft"],
        ),
        "Negative": (
            ["loud", "deafening", "blaring", "chaotic"],
            ["thunderous", "screechy", "roaring", "raucous"],
        ),
    },
    "Acting": {
        "Positive": (
            ["brilliant", "convincing", "superb", "compelling"],
            ["masterful", "riveting", "nuanced", "stellar"],
        ),
        "Negative": (
            ["wooden", "unconvincing", "hammy", "clumsy"],
            ["stilted", "lifeless", "overwrought", "amateurish"],
        ),
    },
    "Storyline": {
        "Positive": (
            ["gripping", "clever", "engaging", "original"],
            ["inventive", "absorbing", "taut", "layered"],
        ),
        "Negative": (
            ["predictable", "muddled", "boring", "contrived"],
            ["meandering", "hollow", "formulaic", "tedious"],
        ),
    },
    "Emotion": {
        "Positive": (
            ["moving", "heartfelt", "uplifting", "tender"],
            ["stirring", "poignant", "cathartic", "soulful"],
        ),
        "Negative": (
            ["numbing", "detached", "joyless", "grating"],
            ["leaden", "clinical", "cheerless", "wearying"],
        ),
    },
    "Cinematography": {
        "Positive": (
            ["gorgeous", "crisp", "luminous", "striking"],
            ["sumptuous", "radiant", "immaculate", "painterly"],
        ),
        "Negative": (
            ["murky", "shaky", "drab", "washed"],
            ["grainy", "smeary", "lurching", "faded"],
        ),
    },
}

_FILLERS = [
    "we arrived around eight",
    "the place sits on main street",
    "it was a tuesday night",
    "my cousin joined us later",
    "parking took a few minutes",
    "we had booked in advance",
]

# Per-concept mixing weights of the task-label rule; extended cyclically
# beyond four concepts.
_RULE_WEIGHTS = (1.0, 0.5, 0.75, 0.25)

_NOISE_RATE = 0.02
_FILLER_RATE = 0.3
_DEFAULT_CLASSES = ["Negative", "Positive", "unknown"]


@dataclass
class SynthConfig:
    seed: int = 0
    n: int = 1000
    n_concepts: int = 4
    n_concept_classes: int = 3
    n_task_classes: int = 5
    shift: bool = False
    max_len: int = 64
    split_id: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("need at least one example")
        if self.n_concepts < 1 or self.n_concept_classes < 2 or self.n_task_classes < 2:
            raise ConfigError("invalid synthetic dataset dimensions")


def _concept_names(k: int) -> list[str]:
    names = list(_ROSTER[:k])
    names += [f"Aspect{i}" for i in range(len(names), k)]
    return names


def _class_names(v: int) -> list[str]:
    names = _DEFAULT_CLASSES[: min(v, 3)]
    names += [f"class{i}" for i in range(len(names), v)]
    return names


def _polarity(class_name: str) -> int:
    if class_name == "Negative":
        return -1
    if class_name == "Positive":
        return 1
    return 0


def _scaffolds_for(name: str) -> list[str]:
    if name in _SCAFFOLDS:
        return _SCAFFOLDS[name]
    noun = name.lower()
    return [
        "the " + noun + " was {}",
        "the " + noun + " seemed {}",
        "overall the " + noun + " felt {}",
        "a {} " + noun + " experience",
    ]


def _adjectives_for(name: str, class_name: str) -> tuple[list[str], list[str]]:
    table = _ADJECTIVES.get(name, {})
    if class_name in table:
        return table[class_name]
    slug = (name + class_name).lower()
    slug = re.sub(r"[^a-z0-9]", "", slug)
    return (
        [f"{slug}a{i}" for i in range(4)],
        [f"{slug}b{i}" for i in range(4)],
    )


def rule_label(concept_classes, class_names, n_task_classes: int) -> int:
    """Deterministic task-label rule: round((C-1)/2 + sum_k w_k * polarity_k).

    Uses Python banker's rounding; the result is clamped to [0, C).
    """
    score = (n_task_classes - 1) / 2.0
    for k, cls in enumerate(concept_classes):
        w = _RULE_WEIGHTS[k % len(_RULE_WEIGHTS)]
        score += w * _polarity(class_names[cls])
    return int(min(max(round(score), 0), n_task_classes - 1))


def synth_vocabulary(n_concepts: int, n_concept_classes: int) -> Vocabulary:
    """Vocabulary over both template pools plus fillers.

    Both pools are always included so that a model trained on an unshifted
    split shares its vocabulary (and embedding table) with shifted splits.
    """
    names = _concept_names(n_concepts)
    classes = _class_names(n_concept_classes)
    tokens: set[str] = set()
    for text in _FILLERS:
        tokens.update(_TOKEN_RE.findall(text.lower()))
    for name in names:
        scaffolds = _scaffolds_for(name)
        for cls_name in classes:
            if cls_name == "unknown":
                continue
            for pool in _adjectives_for(name, cls_name):
                for scaffold in scaffolds:
                    for adj in pool:
                        tokens.update(_TOKEN_RE.findall(scaffold.format(adj).lower()))
    return Vocabulary.from_tokens(tokens)


def synth_generate(cfg: SynthConfig, vocab_size: int | None = None):
    """Generate one synthetic split. Returns (split, vocabulary, schema).

    Deterministic given (seed, split_id, shift). Each non-"unknown" concept
    contributes one templated phrase; "unknown" contributes nothing. The task
    label follows :func:`rule_label` with 2% of labels flipped by +-1; the
    flip and the pre-noise label are recorded in each example's debug field.

    Labels are drawn from an rng stream that ignores ``shift``, so a shifted
    split is a paired rewording of its unshifted twin: same concept values
    and task labels, with half of the phrases drawn from pool B.
    """
    names = _concept_names(cfg.n_concepts)
    classes = _class_names(cfg.n_concept_classes)
    schema = DatasetSchema(
        concept_names=names,
        concept_class_names=classes,
        task_class_count=cfg.n_task_classes,
        max_len=cfg.max_len,
    )
    vocab = synth_vocabulary(cfg.n_concepts, cfg.n_concept_classes)
    if vocab_size is not None and len(vocab) > vocab_size:
        raise ConfigError(
            f"templates need {len(vocab)} vocabulary entries, got cap {vocab_size}"
        )
    rng_labels = np.random.default_rng([cfg.seed, cfg.split_id, 1])
    rng_text = np.random.default_rng([cfg.seed, cfg.split_id, 2])
    examples = []
    for _ in range(cfg.n):
        concept_classes = rng_labels.integers(0, cfg.n_concept_classes, size=cfg.n_concepts)
        phrases = []
        for k, cls in enumerate(concept_classes):
            cls_name = classes[cls]
            if cls_name == "unknown":
                continue
            pool_a, pool_b = _adjectives_for(names[k], cls_name)
            # Drawn unconditionally so shifted/unshifted twins consume the
            # same rng stream and stay phrase-aligned.
            use_b = rng_text.random() < 0.5 and cfg.shift
            pool = pool_b if use_b else pool_a
            scaffolds = _scaffolds_for(names[k])
            t = int(rng_text.integers(0, len(scaffolds)))
            adj = pool[int(rng_text.integers(0, len(pool)))]
            phrases.append(scaffolds[t].format(adj))
        if rng_text.random() < _FILLER_RATE:
            phrases.append(_FILLERS[int(rng_text.integers(0, len(_FILLERS)))])
        order = rng_text.permutation(len(phrases))
        text = " ".join(phrases[i] for i in order)
        base = rule_label(concept_classes, classes, cfg.n_task_classes)
        label = base
        flipped = bool(rng_labels.random() < _NOISE_RATE)
        if flipped:
            step = int(rng_labels.choice([-1, 1]))
            label = int(min(max(label + step, 0), cfg.n_task_classes - 1))
        examples.append(
            Example(
                token_ids=tokenize(text, vocab, cfg.max_len),
                concept_labels=np.asarray(concept_classes, dtype=np.int64),
                task_label=label,
                text=text,
                debug={"noise_flipped": flipped, "rule_label": base},
            )
        )
    return Split(examples=examples, schema=schema), vocab, schema


def generate_dataset_dir(
    out_dir,
    seed: int,
    n_train: int,
    n_dev: int,
    n_test: int,
    n_concepts: int = 4,
    n_concept_classes: int = 3,
    n_task_classes: int = 5,
    shift: bool = False,
    max_len: int = 64,
) -> dict:
    """Write train/dev/test JSONL plus vocab.json and schema.json.

    ``shift`` applies to the test split only, so train/dev bytes are
    identical across shifted and unshifted runs with the same seed.
    """
    os.makedirs(out_dir, exist_ok=True)
    sizes = {"train": n_train, "dev": n_dev, "test": n_test}
    written = {}
    vocab = schema = None
    for split_id, (split_name, n) in enumerate(sizes.items()):
        cfg = SynthConfig(
            seed=seed,
            n=n,
            n_concepts=n_concepts,
            n_concept_classes=n_concept_classes,
            n_task_classes=n_task_classes,
            shift=shift and split_name == "test",
            max_len=max_len,
            split_id=split_id,
        )
        split, vocab, schema = synth_generate(cfg)
        path = os.path.join(out_dir, f"{split_name}.jsonl")
        save_jsonl(split, path)
        written[split_name] = path
    save_vocab(vocab, os.path.join(out_dir, "vocab.json"))
    save_schema(schema, os.path.join(out_dir, "schema.json"))
    written["vocab"] = os.path.join(out_dir, "vocab.json")
    written["schema"] = os.path.join(out_dir, "schema.json")
    return written


def load_dataset_dir(data_dir):
    """Load vocab, schema and the three standard splits from a directory."""
    vocab = load_vocab(os.path.join(data_dir, "vocab.json"))
    schema = load_schema(os.path.join(data_dir, "schema.json"))
    splits = {}
    for name in ("train", "dev", "test"):
        path = os.path.join(data_dir, f"{name}.jsonl")
        if os.path.exists(path):
            splits[name] = load_jsonl(path, schema, vocab)
    return vocab, schema, splits
