"""Synthetic entity-labeled product corpus, dictionary labeler, vocab and file IO."""
from __future__ import annotations

import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORMAL = "normal word"
PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SHARD_SIZE = 1000
_SLOT = re.compile(r"\{([^}]+)\}")
_CLAUSE_TOKEN = re.compile(r"\{[^}]+\}|\S+")


class SchemaError(ValueError):
    pass


class CorpusParseError(ValueError):
    pass


@dataclass
class AttributeSchema:
    categories: list[str]
    lexicons: dict[str, list[str]]
    templates: list[list[str]]
    open_class: list[str] = field(default_factory=list)
    # reserved for overlapping lexicons; disjoint lexicons never consult it
    priority: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._lookup = None

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def normal_id(self) -> int:
        return self.categories.index(NORMAL)

    def category_id(self, name: str) -> int:
        return self.categories.index(name)

    @property
    def lookup(self) -> dict[str, int]:
        if self._lookup is None:
            self._lookup = {tok: self.categories.index(cat)
                            for cat, toks in self.lexicons.items() for tok in toks}
        return self._lookup

    def validate(self) -> None:
        if NORMAL not in self.categories:
            raise SchemaError(f"categories must include {NORMAL!r}")
        if len(self.categories) < 2 or len(set(self.categories)) != len(self.categories):
            raise SchemaError("need at least two distinct categories")
        for cat in self.lexicons:
            if cat not in self.categories:
                raise SchemaError(f"lexicon for unknown category {cat!r}")
        seen: dict[str, str] = {}
        for cat, toks in self.lexicons.items():
            for tok in toks:
                if not tok or any(ch.isspace() for ch in tok):
                    raise SchemaError(f"lexicon token {tok!r} in {cat!r} is not a single token")
                if tok in seen and seen[tok] != cat:
                    raise SchemaError(f"token {tok!r} appears in lexicons {seen[tok]!r} and {cat!r}")
                seen[tok] = cat
        if not self.templates:
            raise SchemaError("template bank is empty")
        for ti, template in enumerate(self.templates):
            for clause in template:
                for tok in _CLAUSE_TOKEN.findall(clause):
                    m = _SLOT.fullmatch(tok)
                    if m:
                        if m.group(1) not in self.categories:
                            raise SchemaError(f"template {ti} slot {tok} names no category")
                    elif tok in seen:
                        raise SchemaError(f"template {ti} function word {tok!r} is in lexicon {seen[tok]!r}")

    def to_json(self) -> dict:
        return {"categories": self.categories, "lexicons": self.lexicons, "templates": self.templates,
                "open_class": self.open_class, "priority": self.priority}

    @classmethod
    def from_json(cls, obj: dict) -> "AttributeSchema":
        try:
            schema = cls(list(obj["categories"]), {k: list(v) for k, v in obj["lexicons"].items()},
                         [list(t) for t in obj["templates"]], list(obj.get("open_class", [])),
                         list(obj.get("priority", [])))
        except (KeyError, TypeError, AttributeError) as e:
            raise SchemaError(f"malformed schema: {e}") from None
        schema.validate()
        return schema


def save_schema(schema: AttributeSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_json(), indent=1))


def load_schema(path) -> AttributeSchema:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: {e}") from None
    return AttributeSchema.from_json(obj)


_LEXICONS = {
    "Brand": ["uniqlo", "zara", "levis", "prada", "toryburch", "gucci", "muji", "nike", "adidas",
              "lining", "anta", "vero-moda", "hm", "gap", "coach", "burberry", "puma", "fila",
              "mango", "bershka"],
    "Color": ["blue", "black", "white", "red", "navy", "beige", "khaki", "pink", "grey", "olive",
              "burgundy", "cream", "light-blue", "dark-green", "camel", "ivory"],
    "Material": ["cotton", "denim", "linen", "silk", "wool", "nylon", "leather", "polyester",
                 "cashmere", "corduroy", "chiffon", "velvet", "lace", "twill"],
    "Style": ["casual", "vintage", "minimalist", "streetwear", "elegant", "preppy", "sporty",
              "bohemian", "retro", "chic", "korean-style", "business", "romantic", "workwear"],
    "Category": ["jeans", "dress", "backpack", "jacket", "t-shirt", "skirt", "coat", "sweater",
                 "shirt", "hoodie", "trousers", "blazer", "cardigan", "shorts", "tote-bag", "sneakers"],
    "Element": ["print-flower", "zipper", "pocket", "button", "embroidery", "ruffle", "stripe",
                "plaid", "letter-print", "lace-trim", "bow", "drawstring", "polka-dot", "patchwork"],
    "Fit": ["high-waist", "straight", "slim", "loose", "oversized", "cropped", "wide-leg",
            "regular-fit", "tapered", "bodycon", "a-line", "relaxed"],
    NORMAL: ["authentic", "new-arrival", "bestseller", "limited-edition", "premium", "hot-sale",
             "must-have", "genuine", "official", "exclusive", "top-rated", "free-shipping"],
}

_OPENINGS = [
    "this {Category} is made for everyday wear .",
    "meet the new {Category} of the season .",
    "here is a {Category} you will love .",
    "this {Category} is easy to match .",
]
_CLAUSES = {
    "Brand": ["it comes from {Brand} , a trusted name .",
              "the label {Brand} stands behind it .",
              "designed by {Brand} with great care ."],
    "Color": ["the {Color} tone looks clean and fresh .",
              "a soft {Color} shade brightens you .",
              "in {Color} it suits any occasion ."],
    "Material": ["the {Material} fabric feels soft .",
                 "made of {Material} , it feels comfortable .",
                 "quality {Material} keeps it durable ."],
    "Style": ["the {Style} mood shows your personality .",
              "a {Style} design makes you stand out .",
              "it brings a {Style} vibe to the outfit ."],
    "Element": ["the {Element} detail adds charm .",
                "with a {Element} design it looks lively .",
                "a neat {Element} makes it more practical ."],
    "Fit": ["the {Fit} cut looks slender .",
            "with a {Fit} shape legs look longer .",
            "its {Fit} silhouette flatters your body ."],
    NORMAL: ["it is truly {normal word} ."],
}
_CLOSINGS = [
    "add it to your wardrobe today .",
    "a great choice all year .",
    "you will wear it every day .",
    "it is a piece worth having .",
]


def default_schema(n_templates: int = 20, seed: int = 7) -> AttributeSchema:
    """Eight categories (seven entity types plus normal word) and a clause-based template bank.

    A template is a list of clauses; at instantiation clauses whose slot category was
    not drawn are dropped, so every description mentions exactly the drawn values.
    """
    rng = np.random.default_rng(seed)
    entity = ["Brand", "Color", "Material", "Style", "Category", "Element", "Fit"]
    templates = []
    body_cats = [c for c in entity if c != "Category"] + [NORMAL]
    for i in range(n_templates):
        order = [body_cats[j] for j in rng.permutation(len(body_cats))]
        clauses = [_OPENINGS[i % len(_OPENINGS)]]
        clauses += [_CLAUSES[c][rng.integers(len(_CLAUSES[c]))] for c in order]
        clauses.append(_CLOSINGS[(i // len(_OPENINGS)) % len(_CLOSINGS)])
        templates.append(clauses)
    schema = AttributeSchema(entity + [NORMAL], {k: list(v) for k, v in _LEXICONS.items()}, templates)
    schema.validate()
    return schema


@dataclass
class Sample:
    keywords: list[str]
    keyword_labels: list[str]
    description: list[str]
    description_labels: list[str]

    def to_json(self) -> dict:
        return {"keywords": self.keywords, "keyword_labels": self.keyword_labels,
                "description": self.description, "description_labels": self.description_labels}


def label_tokens(tokens, schema: AttributeSchema) -> list[int]:
    """Dictionary labeler: lexicon hit gives that category, anything else is normal word."""
    lookup, normal = schema.lookup, schema.normal_id
    return [lookup.get(tok, normal) for tok in tokens]


def _instantiate(template: list[str], values: dict[str, str]) -> list[str]:
    out = []
    for clause in template:
        slots = _SLOT.findall(clause)
        if any(s not in values for s in slots):
            continue
        for tok in _CLAUSE_TOKEN.findall(clause):
            m = _SLOT.fullmatch(tok)
            out.append(values[m.group(1)] if m else tok)
    return out


def _draw_sample(schema: AttributeSchema, rng: np.random.Generator) -> Sample:
    cats = schema.categories
    entity = [c for c in cats if c != NORMAL]
    for c in cats:
        if c != NORMAL and not schema.lexicons.get(c):
            raise SchemaError(f"category {c!r} has an empty lexicon")
    # a product always has a category when the schema defines one
    anchor = ["Category"] if "Category" in entity else []
    others = [c for c in entity if c not in anchor]
    lo = max(3 - len(anchor), 0)
    k = int(rng.integers(lo, len(others) + 1))
    chosen = set(anchor) | {others[j] for j in rng.choice(len(others), size=k, replace=False)}
    if len(chosen) < 3:
        raise SchemaError("schema needs at least three entity categories")
    values = {c: schema.lexicons[c][rng.integers(len(schema.lexicons[c]))] for c in entity if c in chosen}
    # one normal keyword only alongside >= 6 entity keywords keeps the entity share >= 6/7
    if len(values) >= 6 and schema.lexicons.get(NORMAL) and rng.random() < 0.5:
        pool = schema.lexicons[NORMAL]
        values[NORMAL] = pool[rng.integers(len(pool))]
    template = schema.templates[rng.integers(len(schema.templates))]
    desc = _instantiate(template, values)
    keywords = [values[c] for c in cats if c in values]
    return Sample(keywords, [c for c in cats if c in values], desc,
                  [cats[i] for i in label_tokens(desc, schema)])


def _shard(schema, start, stop, seed, shard):
    rng = np.random.default_rng([seed, shard])
    return [_draw_sample(schema, rng) for _ in range(start, stop)]


def generate_corpus(schema: AttributeSchema, n: int, seed: int = 0, workers: int = 1) -> list[Sample]:
    """Deterministic in (schema, n, seed); sharded so worker count never changes the output."""
    if n < 0:
        raise ValueError("n must be >= 0")
    schema.validate()
    jobs = [(s, min(s + SHARD_SIZE, n), seed, i) for i, s in enumerate(range(0, n, SHARD_SIZE))]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _shard(schema, *j), jobs))
    else:
        parts = [_shard(schema, *j) for j in jobs]
    return [s for part in parts for s in part]


def entity_fraction(corpus: list[Sample]) -> float:
    total = sum(len(s.keywords) for s in corpus)
    ents = sum(lab != NORMAL for s in corpus for lab in s.keyword_labels)
    return ents / total if total else 1.0


class Vocab:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i not in (PAD, BOS):
                out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos)))

    @classmethod
    def load(cls, path) -> "Vocab":
        v = cls()
        entries = []
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise CorpusParseError(f"{path}:{ln}: expected token<TAB>id")
            entries.append((int(parts[1]), parts[0]))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))) or [t for _, t in entries[:4]] != list(RESERVED):
            raise CorpusParseError(f"{path}: ids must be contiguous from 0 with reserved tokens first")
        for _, t in entries[4:]:
            v.add(t)
        return v


def build_vocab(corpus: list[Sample]) -> Vocab:
    if not corpus:
        raise ValueError("cannot build a vocab from an empty corpus")
    v = Vocab()
    for s in corpus:
        for t in s.keywords:
            v.add(t)
        for t in s.description:
            v.add(t)
    return v


def token_counts(corpus: list[Sample]) -> Counter:
    c = Counter()
    for s in corpus:
        c.update(s.keywords)
        c.update(s.description)
    return c


def write_corpus(corpus: list[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in corpus:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_corpus(path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                s = Sample(list(obj["keywords"]), list(obj["keyword_labels"]),
                           list(obj["description"]), list(obj["description_labels"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusParseError(f"{path}:{ln}: {e}") from None
            if len(s.keywords) != len(s.keyword_labels) or len(s.description) != len(s.description_labels):
                raise CorpusParseError(f"{path}:{ln}: token/label length mismatch")
            out.append(s)
    return out
