"""Synthetic planted-rule VQA task: generator, oracle labeler, dataset files.

Three label-generating rules are planted so that specific routing
mechanisms are required to solve them:

* recognition: one capsule carries a tag vector; the answer is that tag's
  id. A single capsule suffices.
* contextual: a cluster of capsules shares a common base direction so
  their pairwise similarity exceeds a planted threshold; the answer is the
  majority tag within the cluster. Isolated distractor capsules carry
  other tags, so capsule context (not pooled content) decides.
* knowledge: one capsule carries a tag, and the answer index is stored
  only in the knowledge fact column keyed by that tag. The answer value is
  drawn independently per instance, so (F, Qhat) carry no information
  about it and any visual-question-only classifier sits at chance.

The question matrix encodes the rule through a reserved basis direction;
knowledge questions additionally encode the queried tag. Everything is
deterministic in the master seed: per-instance streams are spawned from
(master_seed, split, index).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

RULES = ("recognition", "contextual", "knowledge")

# signal scales, tuned once against the pooled-linear baseline so that
# recognition is easy for it while knowledge stays at chance
TAG_SCALE = 10.0
BASE_SCALE = 16.0
RULE_SCALE = 4.0
QTAG_SCALE = 4.0
KEY_SCALE = 6.0
ANS_SCALE = 6.0
FACT_NOISE = 0.25
SIMILARITY_THRESHOLD = 0.4


class TaskError(ValueError):
    """Invalid task specification or corrupted dataset files."""


@dataclass
class TaskSpec:
    """Everything the generator needs; a pure function of these fields."""

    d_v: int = 64
    d: int = 32
    d_k: int = 24
    N: int = 12
    L: int = 6
    K: int = 8
    A: int = 16
    n_tags: int = 10
    train: int = 2000
    val: int = 400
    test: int = 400
    rule_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    noise: float = 0.35
    master_seed: int = 7

    def validate(self) -> None:
        if self.A < self.n_tags:
            raise TaskError(f"A={self.A} smaller than tag vocabulary n_tags={self.n_tags}")
        if self.n_tags < self.K:
            raise TaskError(f"n_tags={self.n_tags} must cover K={self.K} distinct fact keys")
        if self.d < 3 + self.n_tags:
            raise TaskError(f"d={self.d} cannot reserve 3 rule + {self.n_tags} tag directions")
        if self.N < 4 or self.L < 2:
            raise TaskError("need N >= 4 and L >= 2")
        c, _, distractors = _contextual_layout(self.N)
        if 1 + (c - c // 2 - 1) + distractors > self.n_tags:
            raise TaskError("tag vocabulary too small for the contextual layout")
        if len(self.rule_mix) != 3 or any(p < 0 for p in self.rule_mix):
            raise TaskError("rule_mix must be three non-negative proportions")
        if abs(sum(self.rule_mix) - 1.0) > 1e-9:
            raise TaskError(f"rule_mix must sum to 1, got {sum(self.rule_mix)}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TaskSpec":
        spec = cls()
        for f in fields(cls):
            if f.name in raw:
                v = raw[f.name]
                setattr(spec, f.name, tuple(v) if f.name == "rule_mix" else v)
        return spec


@dataclass
class Vocabulary:
    """Seed-derived code vectors shared by every instance of a dataset."""

    tag_vis: np.ndarray  # n_tags x d_v, unit rows
    key_codes: np.ndarray  # n_tags x d_k
    ans_codes: np.ndarray  # A x d_k


@dataclass
class PlantedState:
    """Generative internals kept aside for the oracle labeler."""

    rule: str
    tag: int | None = None
    majority_tag: int | None = None
    answer: int | None = None


@dataclass
class Instance:
    rule: str
    seed: int
    F: np.ndarray  # d_v x N
    Qhat: np.ndarray  # d x L
    Kraw: np.ndarray  # d_k x K
    labels: np.ndarray  # length A, soft targets in [0, 1]
    planted: PlantedState | None = field(default=None, compare=False)

    @property
    def label(self) -> int:
        return int(np.argmax(self.labels))


def build_vocabulary(spec: TaskSpec) -> Vocabulary:
    rng = np.random.default_rng(np.random.SeedSequence(spec.master_seed, spawn_key=(240,)))
    tag_vis = _unit_rows(rng.standard_normal((spec.n_tags, spec.d_v)))
    key_codes = _unit_rows(rng.standard_normal((spec.n_tags, spec.d_k)))
    ans_codes = _unit_rows(rng.standard_normal((spec.A, spec.d_k)))
    for mat in (tag_vis, key_codes, ans_codes):
        gram = mat @ mat.T
        np.fill_diagonal(gram, 0.0)
        if np.abs(gram).max() > 0.999:
            raise TaskError("degenerate vocabulary: two code vectors nearly collinear")
    return Vocabulary(tag_vis, key_codes, ans_codes)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _contextual_layout(n_capsules: int) -> tuple[int, int, int]:
    """(cluster size, majority count, distractor count) for N capsules."""
    cluster = max(3, round(0.4 * n_capsules))
    majority = cluster // 2 + 1
    distractors = min(3, n_capsules - cluster - 1)
    return cluster, majority, distractors


def oracle_label(planted: PlantedState) -> int:
    """The unique correct answer index, straight from the planted rule."""
    if planted.rule == "recognition":
        return int(planted.tag)
    if planted.rule == "contextual":
        return int(planted.majority_tag)
    if planted.rule == "knowledge":
        return int(planted.answer)
    raise TaskError(f"unknown rule '{planted.rule}'")


def _fill_knowledge(rng, spec, vocab, true_tag=None, true_answer=None):
    """K fact columns with distinct keys; optionally plant one true fact.

    Distractor columns carry filler value vectors from outside the answer
    vocabulary, so averaging facts dilutes the true answer with neutral
    noise instead of competing answer codes.
    """
    kraw = FACT_NOISE * rng.standard_normal((spec.d_k, spec.K))
    keys = rng.permutation(spec.n_tags)[: spec.K]
    fillers = _unit_rows(rng.standard_normal((spec.K, spec.d_k)))
    slot = -1
    if true_tag is not None:
        if true_tag in keys:
            slot = int(np.where(keys == true_tag)[0][0])
        else:
            slot = int(rng.integers(spec.K))
            keys[slot] = true_tag
    for j in range(spec.K):
        value = vocab.ans_codes[true_answer] if j == slot else fillers[j]
        kraw[:, j] += KEY_SCALE * vocab.key_codes[keys[j]] + ANS_SCALE * value
    return kraw


def make_instance(spec: TaskSpec, vocab: Vocabulary, rule: str, seed: int) -> Instance:
    rng = np.random.default_rng(seed)
    F = spec.noise * rng.standard_normal((spec.d_v, spec.N))
    Qhat = spec.noise * rng.standard_normal((spec.d, spec.L))
    Qhat[RULES.index(rule), 0] += RULE_SCALE

    if rule == "recognition":
        tag = int(rng.integers(spec.n_tags))
        capsule = int(rng.integers(spec.N))
        F[:, capsule] += TAG_SCALE * vocab.tag_vis[tag]
        Kraw = _fill_knowledge(rng, spec, vocab)
        planted = PlantedState(rule=rule, tag=tag)
    elif rule == "contextual":
        cluster, majority, n_distract = _contextual_layout(spec.N)
        order = rng.permutation(spec.N)
        members, distract = order[:cluster], order[cluster : cluster + n_distract]
        tags = rng.permutation(spec.n_tags)
        majority_tag = int(tags[0])
        minority_tags = tags[1 : 1 + (cluster - majority)]
        distract_tags = tags[1 + (cluster - majority) : 1 + (cluster - majority) + n_distract]
        base = rng.standard_normal(spec.d_v)
        base /= np.linalg.norm(base)
        member_tags = [majority_tag] * majority + [int(t) for t in minority_tags]
        for idx, tag in zip(members, member_tags):
            F[:, idx] += BASE_SCALE * base + TAG_SCALE * vocab.tag_vis[tag]
        for idx, tag in zip(distract, distract_tags):
            F[:, idx] += TAG_SCALE * vocab.tag_vis[int(tag)]
        Kraw = _fill_knowledge(rng, spec, vocab)
        planted = PlantedState(rule=rule, majority_tag=majority_tag)
    elif rule == "knowledge":
        tag = int(rng.integers(spec.n_tags))
        capsule = int(rng.integers(spec.N))
        F[:, capsule] += TAG_SCALE * vocab.tag_vis[tag]
        answer = int(rng.integers(spec.A))
        Kraw = _fill_knowledge(rng, spec, vocab, true_tag=tag, true_answer=answer)
        Qhat[3 + tag, 1] += QTAG_SCALE
        planted = PlantedState(rule=rule, tag=tag, answer=answer)
    else:
        raise TaskError(f"unknown rule '{rule}'")

    labels = np.zeros(spec.A)
    labels[oracle_label(planted)] = 1.0
    return Instance(rule=rule, seed=seed, F=F, Qhat=Qhat, Kraw=Kraw, labels=labels, planted=planted)


def _rule_counts(n: int, mix) -> list[int]:
    """Largest-remainder apportionment, within +/-1 of exact proportions."""
    exact = [n * p for p in mix]
    counts = [int(x) for x in exact]
    remainders = sorted(range(3), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    return counts


def _instance_seed(master_seed: int, split_idx: int, index: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(split_idx, index + 1))
    words = ss.generate_state(2, np.uint32)
    return (int(words[0]) << 32) | int(words[1])


def generate_split(spec: TaskSpec, split: str, vocab: Vocabulary | None = None) -> list[Instance]:
    spec.validate()
    if vocab is None:
        vocab = build_vocabulary(spec)
    split_idx = ("train", "val", "test").index(split)
    n = getattr(spec, split)
    counts = _rule_counts(n, spec.rule_mix)
    rules = [RULES[r] for r in range(3) for _ in range(counts[r])]
    order_rng = np.random.default_rng(np.random.SeedSequence(spec.master_seed, spawn_key=(split_idx, 0)))
    order_rng.shuffle(rules)
    return [
        make_instance(spec, vocab, rules[i], _instance_seed(spec.master_seed, split_idx, i))
        for i in range(n)
    ]


def generate_dataset(spec: TaskSpec) -> dict[str, list[Instance]]:
    vocab = build_vocabulary(spec)
    return {split: generate_split(spec, split, vocab) for split in ("train", "val", "test")}


# ---------------------------------------------------------------------------
# dataset files: JSON-Lines per split plus a checksummed manifest


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _fmt_vec(v) -> str:
    return "[" + ",".join(_fmt(x) for x in v) + "]"


def _fmt_mat(m) -> str:
    return "[" + ",".join(_fmt_vec(row) for row in m) + "]"


def instance_to_json(inst: Instance) -> str:
    return (
        '{"rule":"%s","seed":%d,"F":%s,"Qhat":%s,"Kraw":%s,"labels":%s}'
        % (inst.rule, inst.seed, _fmt_mat(inst.F), _fmt_mat(inst.Qhat), _fmt_mat(inst.Kraw), _fmt_vec(inst.labels))
    )


def instance_from_json(line: str) -> Instance:
    obj = json.loads(line)
    return Instance(
        rule=obj["rule"],
        seed=int(obj["seed"]),
        F=np.asarray(obj["F"], dtype=np.float64),
        Qhat=np.asarray(obj["Qhat"], dtype=np.float64),
        Kraw=np.asarray(obj["Kraw"], dtype=np.float64),
        labels=np.asarray(obj["labels"], dtype=np.float64),
    )


def write_dataset(spec: TaskSpec, out_dir: str) -> dict:
    """Generate all splits, write JSONL files plus manifest, return manifest."""
    os.makedirs(out_dir, exist_ok=True)
    datasets = generate_dataset(spec)
    manifest = {"format_version": 1, "task": spec.to_dict(), "splits": {}}
    for split, instances in datasets.items():
        filename = f"{split}.jsonl"
        payload = "".join(instance_to_json(inst) + "\n" for inst in instances).encode("utf-8")
        with open(os.path.join(out_dir, filename), "wb") as fh:
            fh.write(payload)
        manifest["splits"][split] = {
            "file": filename,
            "count": len(instances),
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(path):
        raise TaskError(f"no manifest.json under {data_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_split(data_dir: str, split: str, verify: bool = True) -> list[Instance]:
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise TaskError(f"split '{split}' not in manifest")
    entry = manifest["splits"][split]
    path = os.path.join(data_dir, entry["file"])
    with open(path, "rb") as fh:
        payload = fh.read()
    if verify:
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise TaskError(f"checksum mismatch for {entry['file']}")
    lines = payload.decode("utf-8").splitlines()
    instances = [instance_from_json(line) for line in lines if line]
    if len(instances) != entry["count"]:
        raise TaskError(f"{entry['file']}: expected {entry['count']} instances, found {len(instances)}")
    return instances
