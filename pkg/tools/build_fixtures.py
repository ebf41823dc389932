"""Regenerate the bundled fixtures under src/modelcollab/data.

Run from the repository root: ``python3 tools/build_fixtures.py``. Output is
deterministic, so rerunning leaves the tree unchanged.
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from modelcollab.core import hash_embed
from modelcollab.tensors import TensorMap, tensor_save

DATA = Path(__file__).resolve().parents[1] / "src" / "modelcollab" / "data"
LETTERS = "ABCDE"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def say(letter: str | None) -> str:
    return f"The answer is ({letter})." if letter else "I am not sure."


# two-task multiple choice set ---------------------------------------------------

MATH = [
    ("Compute 3 + 4.", ["6", "7", "8", "9", "10"], "B"),
    ("Compute 12 / 4.", ["2", "4", "3", "6", "5"], "C"),
    ("What is 5 squared?", ["25", "10", "20", "15", "30"], "A"),
    ("Compute 9 - 11.", ["2", "-1", "0", "-2", "1"], "D"),
    ("What is the next prime after 7?", ["9", "8", "10", "13", "11"], "E"),
    ("Compute 6 * 7.", ["36", "48", "42", "40", "49"], "C"),
    ("What is 2 to the power 5?", ["16", "32", "64", "10", "25"], "B"),
    ("Compute 100 - 37.", ["63", "73", "67", "53", "77"], "A"),
]
HISTORY = [
    ("Which city was the capital of the Byzantine Empire?", ["Rome", "Athens", "Constantinople", "Antioch",
                                                             "Alexandria"], "C"),
    ("In which century did movable-type printing spread across Europe?", ["13th", "15th", "17th", "11th",
                                                                         "19th"], "B"),
    ("Who led the Carthaginian army across the Alps?", ["Hannibal", "Scipio", "Hamilcar", "Pyrrhus",
                                                        "Xerxes"], "A"),
    ("Which empire built Machu Picchu?", ["Aztec", "Maya", "Olmec", "Inca", "Toltec"], "D"),
    ("Which treaty ended the Thirty Years' War?", ["Utrecht", "Versailles", "Tordesillas", "Ghent",
                                                   "Westphalia"], "E"),
    ("Which river valley hosted the Harappan civilization?", ["Nile", "Tigris", "Indus", "Yellow", "Danube"], "C"),
    ("Who was the first emperor of unified China?", ["Liu Bang", "Qin Shi Huang", "Kublai Khan", "Wu Zetian",
                                                     "Sun Yat-sen"], "B"),
    ("Which civilization used the cuneiform script first?", ["Sumerian", "Egyptian", "Hittite", "Minoan",
                                                            "Roman"], "A"),
]


def mc_prompt(tag: str, question: str, options: list[str]) -> str:
    opts = " ".join(f"({LETTERS[i]}) {o}" for i, o in enumerate(options))
    return f"[{tag}] {question} Options: {opts}. Reply with the letter."


def wrong(letter: str, shift: int = 1) -> str:
    return LETTERS[(LETTERS.index(letter) + shift) % 5]


def build_toy():
    rows = {"dev": [], "test": []}
    for task, items in (("math", MATH), ("history", HISTORY)):
        for i, (q, opts, gold) in enumerate(items):
            split = "dev" if i < 4 else "test"
            tag = f"toy-{task[0]}{i + 1}"
            rows[split].append({"id": tag, "prompt": mc_prompt(tag, q, opts), "task_kind": "multiple_choice",
                                "domain_tag": "knowledge", "task": task, "gold": [gold]})
    for split, rs in rows.items():
        write_jsonl(DATA / "datasets" / "toy" / f"{split}.jsonl", rs)
    records = rows["dev"] + rows["test"]

    # math expert, history expert, generalist right on the first half of each task
    experts = {"toy_math": "math", "toy_history": "history"}
    for name, good in experts.items():
        answers = {f"[{r['id']}]": say(r["gold"][0] if r["task"] == good else wrong(r["gold"][0]))
                   for r in records}
        write_json(DATA / "mocks" / f"{name}.json", {"answers": answers})
    answers = {}
    for r in records:
        idx = int(r["id"][5:])
        answers[f"[{r['id']}]"] = say(r["gold"][0] if idx in (1, 2, 5, 6) else wrong(r["gold"][0], 2))
    write_json(DATA / "mocks" / "toy_generalist.json", {"answers": answers})
    return records


# token-level mocks ----------------------------------------------------------------

VOCAB = ["<eos>", "The", "answer", "is", "(A)", "(B)", "(C)", "(D)", "(E)"]


def onehot(i: int, p: float = 1.0) -> list[float]:
    rest = (1.0 - p) / (len(VOCAB) - 1)
    return [p if j == i else rest for j in range(len(VOCAB))]


def build_token_mocks():
    eos = onehot(0)
    for name, letter_probs, lead in (
        ("tok_a", [0.55, 0.25, 0.1, 0.05, 0.05], 0.9),
        ("tok_b", [0.2, 0.6, 0.1, 0.05, 0.05], 0.8),
        ("tok_c", [0.3, 0.3, 0.25, 0.1, 0.05], 0.35),
    ):
        dists = {"@0": onehot(1, lead), "@1": onehot(2, 0.9), "@2": onehot(3, 0.9),
                 "@3": [0.0, 0.0, 0.0, 0.0, *letter_probs], "*": eos}
        write_json(DATA / "mocks" / f"{name}.json", {"vocab": VOCAB, "eos_id": 0, "distributions": dists})


# hand-voted majority fixture ---------------------------------------------------------

MV = [  # gold, m1, m2, m3  (None = no extractable answer)
    ("A", "A", "A", "B"),
    ("B", "C", "B", "B"),
    ("C", "C", "D", "D"),
    ("D", "D", "D", "D"),
    ("A", "B", "C", "A"),
    ("E", "E", "A", "E"),
    ("B", "A", "A", "B"),
    ("C", "C", "C", "A"),
    ("D", None, "D", "A"),
    ("A", "B", None, "B"),
]
# plurality over extractable answers, ties to the earliest: A B D D B E A C D B
MV_VOTED = ["A", "B", "D", "D", "B", "E", "A", "C", "D", "B"]


def build_mv10():
    rows = []
    scripts = [{}, {}, {}]
    for i, (gold, *answers) in enumerate(MV, start=1):
        tag = f"mv-{i:02d}"
        rows.append({"id": tag, "prompt": f"[{tag}] Pick the option matching item {i}: (A) (B) (C) (D) (E)",
                     "task_kind": "multiple_choice", "domain_tag": "knowledge", "gold": [gold]})
        for s, a in zip(scripts, answers):
            s[f"[{tag}]"] = say(a)
    write_jsonl(DATA / "datasets" / "mv10" / "test.jsonl", rows)
    for k, s in enumerate(scripts, start=1):
        write_json(DATA / "mocks" / f"mv_{k}.json", {"answers": s})
    correct = [v == g[0] for v, g in zip(MV_VOTED, MV)]
    write_json(DATA / "datasets" / "mv10" / "key.json", {
        "voted": MV_VOTED, "correct": correct, "accuracy": sum(correct) / len(correct)})


# emergence fixture -------------------------------------------------------------------

def build_em20():
    rows = []
    scripts = {"em_a": {}, "em_b": {}, "em_c": {}}
    names = list(scripts)
    for i in range(1, 21):
        tag = f"em-{i:02d}"
        a, b = 3 * i + 1, 7 * i % 11 + 2
        gold = a + b
        prompt = f"[{tag}] Add {a} and {b}. End with the number."
        rows.append({"id": tag, "prompt": prompt, "task_kind": "exact_match", "domain_tag": "reasoning",
                     "gold": [str(gold)]})
        solver = names[(i - 1) % 3] if i <= 16 else None
        for n in names:
            value = gold if n == solver else gold + 1 + names.index(n)
            scripts[n][f"[{tag}]"] = f"I get {value}"
        if i == 17:  # only the summarized debate recovers this one
            scripts["em_a"][f"{prompt}\n\nFinal answers from several models:"] = f"Combining the answers: {gold}"
    write_jsonl(DATA / "datasets" / "em20" / "test.jsonl", rows)
    for n, s in scripts.items():
        write_json(DATA / "mocks" / f"{n}.json", {"answers": s})


# weight-space models -------------------------------------------------------------------

def build_weights(records):
    rng = np.random.default_rng(7)
    emb = np.stack([hash_embed(r["prompt"]) for r in records])
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    pinv = np.linalg.pinv(emb)

    def readout(targets):
        return (pinv @ np.asarray(targets)).T  # (5, 64) with readout @ e_j = targets[j]

    def target(r, good_task, wrong_weight=0.6):
        g = LETTERS.index(r["gold"][0])
        t = np.zeros(5)
        if good_task is None or r["task"] == good_task:
            t[g] = 1.0
        else:
            t[(g + 1) % 5] = wrong_weight
        return t

    layer = rng.normal(size=(16, 16)) * 0.1
    models = {
        "toy_base": np.zeros((5, 64)),
        "toy_math_w": readout([target(r, "math") for r in records]),
        "toy_history_w": readout([target(r, "history") for r in records]),
        "toy_mixed_w": readout([target(r, None) * (0.5 if int(r["id"][5:]) % 2 else -0.2) for r in records]),
    }
    for i, (name, ro) in enumerate(models.items()):
        tm = TensorMap({"readout": ro.astype(np.float32),
                        "layer.weight": (layer + 0.01 * i * rng.normal(size=layer.shape)).astype(np.float32)},
                       metadata={"labels": ",".join(LETTERS)})
        path = DATA / "weights" / f"{name}.safetensors"
        path.parent.mkdir(parents=True, exist_ok=True)
        tensor_save(tm, path)


# example run configs -----------------------------------------------------------------------

def mock(mid, script, desc, params=0):
    d = {"id": mid, "backend": "mock", "script": f"../mocks/{script}.json", "description": desc}
    if params:
        d["param_count"] = params
    return d


TEXT_POOL = [mock("math-expert", "toy_math", "strong at arithmetic and algebra", 7_000_000_000),
             mock("history-expert", "toy_history", "strong at world history", 8_000_000_000),
             mock("generalist", "toy_generalist", "broad general knowledge", 7_000_000_000)]
TOKEN_POOL = [{**mock(f"tok-{c}", f"tok_{c}", f"token model {c}", 7_000_000_000), "vocab_group": "toy-vocab"}
              for c in "abc"]


def weights(mid, name):
    return {"id": mid, "backend": "weights", "path": f"../weights/{name}.safetensors", "param_count": 576}


WEIGHT_POOL = [weights("math-w", "toy_math_w"), weights("history-w", "toy_history_w"),
               weights("mixed-w", "toy_mixed_w")]
BASED_POOL = [weights("base-w", "toy_base"), weights("math-w", "toy_math_w"),
              weights("history-w", "toy_history_w")]
TOY = {"path": "../datasets/toy", "split": "test", "dev_split": "dev", "name": "toy"}

CONFIGS = {
    "single_model": (TEXT_POOL, {"model": "generalist"}),
    "prompt_routing": (TEXT_POOL, {}),
    "trained_router": (TEXT_POOL, {"k": 1}),
    "graph_router": (TEXT_POOL, {}),
    "cascade": (TEXT_POOL, {"threshold": 0.5}),
    "nudging": (TOKEN_POOL, {"base": "tok-c"}),
    "switch_generation": (TOKEN_POOL, {"patch_size": 2}),
    "co_llm": (TOKEN_POOL, {"base": "tok-c", "assistant": "tok-a"}),
    "mentor_collab": (TOKEN_POOL, {"generator": "tok-c", "mentor": "tok-a", "inspect_prob": 0.5}),
    "multiagent_debate": (TEXT_POOL, {"rounds": 2}),
    "multiagent_feedback": (TEXT_POOL, {"rounds": 2}),
    "llm_blender": (TEXT_POOL, {"top_k": 2}),
    "knowledge_card": (TEXT_POOL, {}),
    "majority_vote": (TEXT_POOL, {}),
    "hetero_swarms": (TEXT_POOL, {"iterations": 3, "particles": 4}),
    "multiagent_finetuning": (TEXT_POOL, {}),
    "structured_interaction": (TEXT_POOL, {"graph": "ring"}),
    "bbmas": (TEXT_POOL, {}),
    "sparta": (TEXT_POOL, {}),
    "agglm": (TEXT_POOL, {"aggregator": "generalist"}),
    "logit_fusion": (TOKEN_POOL, {}),
    "logit_contrastive": (TOKEN_POOL, {"k": 1, "alpha": 0.5}),
    "greedy_soup": (WEIGHT_POOL, {}),
    "dare_ties": (BASED_POOL, {"p": 0.3}),
    "model_swarms": (WEIGHT_POOL, {"iterations": 5}),
    "lorahub": (BASED_POOL, {"budget": 30}),
    "expo": (WEIGHT_POOL, {"alpha": 0.5}),
}


def build_configs():
    for method, (pool, params) in CONFIGS.items():
        cfg = {"pool": pool, "method": {"id": method, "params": params}, "dataset": dict(TOY), "seed": 0,
               "generation": {"temperature": 0.0, "max_new_tokens": 64}, "max_concurrency": 2}
        write_json(DATA / "configs" / f"{method}.json", cfg)
    mv_pool = [mock(f"voter-{k}", f"mv_{k}", f"voter {k}") for k in (1, 2, 3)]
    write_json(DATA / "configs" / "mv10_majority_vote.json", {
        "pool": mv_pool, "method": {"id": "majority_vote"},
        "dataset": {"path": "../datasets/mv10", "split": "test", "name": "mv10"}, "seed": 0})
    em_pool = [mock(n.replace("_", "-"), n, f"solver {n[-1]}") for n in ("em_a", "em_b", "em_c")]
    write_json(DATA / "configs" / "em20_debate.json", {
        "pool": em_pool, "method": {"id": "multiagent_debate", "params": {"rounds": 2, "summarizer": "em-a"}},
        "dataset": {"path": "../datasets/em20", "split": "test", "name": "em20"}, "seed": 0})


if __name__ == "__main__":
    for sub in ("datasets", "mocks", "weights", "configs"):
        shutil.rmtree(DATA / sub, ignore_errors=True)
    records = build_toy()
    build_token_mocks()
    build_mv10()
    build_em20()
    build_weights(records)
    build_configs()
    print(f"fixtures written to {DATA}")
