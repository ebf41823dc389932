"""Text-level collaboration: models exchange generated text.

Debate, feedback, ranking and fusion, knowledge cards, voting, DAG swarms,
graph-structured interaction, a shared blackboard, Elo-weighted mutual
judging and response aggregation.
"""
from __future__ import annotations

import itertools
import logging
import math
import re
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import prompts
from .core import GenerationParams, ModelBackend, ModelPool, parallel_map
from .errors import ArgumentError, TransportError
from .evalkit import NO_ANSWER, DatasetRecord, answer_for, extract_answer, score_instance
from .pso import PSOHyper, pso_maximize

LOGGER = logging.getLogger(__name__)


@dataclass
class Message:
    seq: int
    round: int
    phase: int
    model_id: str
    role: str
    text: str
    refs: tuple[int, ...] = ()
    target: str | None = None

    def to_json(self) -> dict:
        d = {"seq": self.seq, "round": self.round, "phase": self.phase, "model": self.model_id,
             "role": self.role, "text": self.text, "refs": list(self.refs)}
        if self.target is not None:
            d["target"] = self.target
        return d


@dataclass
class Transcript:
    """Messages of a multi-round exchange.

    Messages are ordered by (round, phase); a message may only reference
    messages with a strictly smaller (round, phase).
    """

    messages: list[Message] = field(default_factory=list)
    final_answer: str = ""

    def add(self, round_: int, phase: int, model_id: str, role: str, text: str,
            refs: Iterable[int] = (), target: str | None = None) -> Message:
        msg = Message(len(self.messages), round_, phase, model_id, role, text, tuple(refs), target)
        self.messages.append(msg)
        return msg

    @property
    def rounds(self) -> list[list[Message]]:
        """Answer-bearing rounds (summary excluded)."""
        n = 1 + max((m.round for m in self.messages if m.role != "summary"), default=-1)
        out: list[list[Message]] = [[] for _ in range(n)]
        for m in self.messages:
            if m.role != "summary":
                out[m.round].append(m)
        return out

    @property
    def summary(self) -> Message | None:
        return next((m for m in self.messages if m.role == "summary"), None)

    def answers(self, round_: int) -> list[Message]:
        return [m for m in self.messages if m.round == round_ and m.role == "answer"]

    def is_causal(self) -> bool:
        for m in self.messages:
            for r in m.refs:
                other = self.messages[r]
                if (other.round, other.phase) >= (m.round, m.phase):
                    return False
        return True

    def to_json(self) -> dict:
        return {"messages": [m.to_json() for m in self.messages], "final_answer": self.final_answer}


def _gen(backend: ModelBackend, prompt: str, params: GenerationParams, warnings: list | None) -> str:
    try:
        return backend.generate(prompt, params).text
    except TransportError as exc:
        if warnings is not None:
            warnings.append(f"{backend.id} failed: {exc}")
        LOGGER.warning("%s failed: %s", backend.id, exc)
        return ""


def majority_vote(answers: Sequence[str]) -> str:
    """Plurality winner; ties go to the earliest first occurrence."""
    if not answers:
        raise ArgumentError("majority_vote needs at least one answer")
    counts = Counter(answers)
    top = max(counts.values())
    return next(a for a in answers if counts[a] == top)


def _summarize(transcript: Transcript, summarizer: ModelBackend, query: str, round_: int,
               params: GenerationParams, warnings) -> None:
    last = transcript.answers(round_)
    prompt = prompts.render("summarize", query=query, answers=prompts.blocks((m.model_id, m.text) for m in last))
    text = _gen(summarizer, prompt, params, warnings)
    transcript.add(round_ + 1, 0, summarizer.id, "summary", text, [m.seq for m in last])
    transcript.final_answer = text


def _initial_round(pool, query, params, transcript, warnings, max_workers):
    texts = parallel_map(lambda b: _gen(b, query, params, warnings), pool, max_workers)
    return {b.id: transcript.add(0, 1, b.id, "answer", t) for b, t in zip(pool, texts)}


def multiagent_debate(pool: ModelPool, query: str, rounds: int = 2, summarizer: ModelBackend | None = None,
                      params: GenerationParams | None = None, warnings: list | None = None,
                      max_workers: int = 1) -> Transcript:
    """Independent answers, then ``rounds - 1`` refinements seeing every other model's last answer."""
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    params = params or GenerationParams()
    summarizer = summarizer or pool[0]
    tr = Transcript()
    prev = _initial_round(pool, query, params, tr, warnings, max_workers)
    for r in range(1, rounds):
        def refine(b, prev=prev):
            others = [prev[o.id] for o in pool if o.id != b.id]
            prompt = prompts.render("debate_refine", query=query, own=prev[b.id].text,
                                    others=prompts.blocks((m.model_id, m.text) for m in others))
            return _gen(b, prompt, params, warnings), [prev[b.id].seq] + [m.seq for m in others]
        results = parallel_map(refine, pool, max_workers)
        prev = {b.id: tr.add(r, 1, b.id, "answer", t, refs) for b, (t, refs) in zip(pool, results)}
    _summarize(tr, summarizer, query, rounds - 1, params, warnings)
    return tr


def multiagent_feedback(pool: ModelPool, query: str, rounds: int = 2, summarizer: ModelBackend | None = None,
                        params: GenerationParams | None = None, warnings: list | None = None,
                        max_workers: int = 1) -> Transcript:
    """Like debate, but each refinement round starts with every model critiquing every other answer."""
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    params = params or GenerationParams()
    summarizer = summarizer or pool[0]
    tr = Transcript()
    prev = _initial_round(pool, query, params, tr, warnings, max_workers)
    for r in range(1, rounds):
        pairs = [(src, dst) for src in pool for dst in pool if src.id != dst.id]
        fb_texts = parallel_map(
            lambda p, prev=prev: _gen(p[0], prompts.render("feedback", query=query, answer=prev[p[1].id].text),
                                      params, warnings), pairs, max_workers)
        received: dict[str, list[Message]] = {b.id: [] for b in pool}
        for (src, dst), t in zip(pairs, fb_texts):
            received[dst.id].append(tr.add(r, 0, src.id, "feedback", t, [prev[dst.id].seq], target=dst.id))

        def refine(b, prev=prev):
            fb = received[b.id]
            prompt = prompts.render("feedback_refine", query=query, own=prev[b.id].text,
                                    feedback=prompts.blocks((m.model_id, m.text) for m in fb))
            return _gen(b, prompt, params, warnings), [prev[b.id].seq] + [m.seq for m in fb]
        results = parallel_map(refine, pool, max_workers)
        prev = {b.id: tr.add(r, 1, b.id, "answer", t, refs) for b, (t, refs) in zip(pool, results)}
    _summarize(tr, summarizer, query, rounds - 1, params, warnings)
    return tr


_AB_RE = re.compile(r"(?<![A-Za-z])([AB])(?![A-Za-z])")


def parse_ab(text: str) -> str | None:
    m = _AB_RE.search(text or "")
    return m.group(1) if m else None


def _judge_pair(judge, query, a, b, params, warnings) -> str | None:
    if isinstance(judge, ModelBackend):
        reply = _gen(judge, prompts.render("blender_judge", query=query, a=a, b=b),
                     GenerationParams(max_new_tokens=16, temperature=0.0, seed=params.seed), warnings)
        return parse_ab(reply)
    try:
        return judge(query, a, b)
    except Exception as exc:  # noqa: BLE001 - a failed comparison contributes no wins
        if warnings is not None:
            warnings.append(f"judge failed: {exc}")
        return None


@dataclass
class BlenderResult:
    final: str
    ranking: list[str]
    wins: dict[str, int]
    responses: dict[str, str]


def llm_blender(pool: ModelPool, query: str, ranker, fuser: ModelBackend, top_k: int = 3,
                params: GenerationParams | None = None, warnings: list | None = None,
                max_workers: int = 1) -> BlenderResult:
    """Rank all responses by pairwise wins, then fuse the ``top_k`` best.

    ``ranker`` is a judge backend (answers "A" or "B") or a callable
    ``(query, a, b) -> "A" | "B" | None``.
    """
    if not 1 <= top_k <= len(pool):
        raise ArgumentError("top_k must lie in [1, |pool|]")
    params = params or GenerationParams()
    texts = parallel_map(lambda b: _gen(b, query, params, warnings), pool, max_workers)
    responses = dict(zip(pool.ids, texts))
    wins = {m: 0 for m in pool.ids}
    for i, j in itertools.combinations(range(len(pool)), 2):
        verdict = _judge_pair(ranker, query, texts[i], texts[j], params, warnings)
        if verdict == "A":
            wins[pool.ids[i]] += 1
        elif verdict == "B":
            wins[pool.ids[j]] += 1
    ranking = sorted(pool.ids, key=lambda m: (-wins[m], pool.ids.index(m)))
    top = ranking[:top_k]
    prompt = prompts.render("blender_fuse", query=query, responses=prompts.blocks((m, responses[m]) for m in top))
    return BlenderResult(_gen(fuser, prompt, params, warnings), ranking, wins, responses)


@dataclass
class KnowledgeResult:
    final: str
    paragraphs: dict[str, str]
    reader_prompt: str


def knowledge_card(pool: ModelPool, query: str, reader: ModelBackend, params: GenerationParams | None = None,
                   warnings: list | None = None, max_workers: int = 1) -> KnowledgeResult:
    """Every model writes background knowledge; ``reader`` answers from all of it."""
    params = params or GenerationParams()
    paras = parallel_map(lambda b: _gen(b, prompts.render("knowledge", query=query), params, warnings),
                         pool, max_workers)
    reader_prompt = prompts.render("knowledge_read", query=query,
                                   knowledge=prompts.blocks(zip(pool.ids, paras)))
    return KnowledgeResult(_gen(reader, reader_prompt, params, warnings), dict(zip(pool.ids, paras)),
                           reader_prompt)


@dataclass
class InteractionGraph:
    """Directed graph over model ids; edge (a, b) feeds a's output into b's prompt."""

    nodes: list[str]
    edges: set[tuple[str, str]] = field(default_factory=set)
    acyclic: bool = False
    output: str | None = None

    def __post_init__(self):
        known = set(self.nodes)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ArgumentError(f"edge {(a, b)} references unknown node")
        if self.acyclic and not self.respects_order():
            raise ArgumentError("acyclic graph has an edge against the topological order")
        if self.output is not None and self.output not in known:
            raise ArgumentError(f"unknown output node {self.output!r}")

    def respects_order(self) -> bool:
        pos = {n: i for i, n in enumerate(self.nodes)}
        return all(pos[a] < pos[b] for a, b in self.edges)

    def incoming(self, node: str) -> list[str]:
        return [n for n in self.nodes if (n, node) in self.edges]

    def ancestors(self, node: str) -> set[str]:
        seen, stack = set(), [node]
        while stack:
            for p in self.incoming(stack.pop()):
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    @property
    def sink(self) -> str:
        return self.output if self.output is not None else self.nodes[-1]

    @classmethod
    def empty(cls, nodes: Sequence[str]) -> InteractionGraph:
        return cls(list(nodes))

    @classmethod
    def complete(cls, nodes: Sequence[str]) -> InteractionGraph:
        return cls(list(nodes), {(a, b) for a in nodes for b in nodes if a != b})

    @classmethod
    def ring(cls, nodes: Sequence[str]) -> InteractionGraph:
        n = len(nodes)
        return cls(list(nodes), {(nodes[i], nodes[(i + 1) % n]) for i in range(n) if n > 1})

    def to_json(self) -> dict:
        return {"nodes": self.nodes, "edges": sorted(map(list, self.edges)), "acyclic": self.acyclic,
                "output": self.sink}


def decode_particle(x: np.ndarray, nodes: Sequence[str]) -> InteractionGraph:
    """Pair weights for i<j (binarized at 0) followed by one output score per node."""
    n = len(nodes)
    pairs = list(itertools.combinations(range(n), 2))
    edges = {(nodes[i], nodes[j]) for (i, j), w in zip(pairs, x[:len(pairs)]) if w > 0}
    out = int(np.argmax(x[len(pairs):len(pairs) + n]))
    return InteractionGraph(list(nodes), edges, acyclic=True, output=nodes[out])


def particle_dim(n: int) -> int:
    return n * (n - 1) // 2 + n


def hetero_swarms_infer(graph: InteractionGraph, pool: ModelPool, query: str,
                        params: GenerationParams | None = None, warnings: list | None = None
                        ) -> tuple[str, dict[str, str]]:
    """Run the DAG in node order up to its output node; returns (answer, per-node outputs)."""
    if not graph.respects_order():
        raise ArgumentError("hetero swarms inference needs an acyclic graph in pool order")
    params = params or GenerationParams()
    sink = graph.sink
    needed = graph.ancestors(sink) | {sink}
    outputs: dict[str, str] = {}
    for node in graph.nodes:
        if node not in needed:
            continue
        inc = graph.incoming(node)
        if inc:
            prompt = prompts.render("swarm_node", query=query,
                                    inputs=prompts.blocks((p, outputs[p]) for p in inc))
        else:
            prompt = query
        outputs[node] = _gen(pool.get(node), prompt, params, warnings)
    return outputs[sink], outputs


def graph_dev_utility(pool: ModelPool, params: GenerationParams | None = None, judge: ModelBackend | None = None
                      ) -> Callable[[InteractionGraph, Sequence[DatasetRecord]], float]:
    """Mean dev score of :func:`hetero_swarms_infer` (the default swarm objective)."""
    def utility(graph, dev):
        scores = [score_instance(r, hetero_swarms_infer(graph, pool, r.prompt, params)[0], judge) for r in dev]
        return math.fsum(scores) / len(scores)
    return utility


@dataclass
class SwarmFit:
    graph: InteractionGraph
    utility: float
    history: list[float]


def hetero_swarms_fit(pool: ModelPool, dev: Sequence, evaluator=None, *, iterations: int = 10,
                      hyper: PSOHyper | None = None, seed: int = 0, params: GenerationParams | None = None
                      ) -> SwarmFit:
    """PSO over real edge weights of a DAG in pool order; returns the best binarized graph.

    ``evaluator(graph, dev) -> float`` defaults to mean dev score. Utilities
    are cached per distinct graph.
    """
    if not dev:
        raise ArgumentError("hetero swarms needs a non-empty dev set")
    evaluator = evaluator or graph_dev_utility(pool, params)
    hyper = hyper or PSOHyper()
    nodes = pool.ids
    cache: dict[tuple, float] = {}

    def objective(x):
        g = decode_particle(x, nodes)
        key = (tuple(sorted(g.edges)), g.sink)
        if key not in cache:
            try:
                cache[key] = float(evaluator(g, dev))
            except Exception:  # noqa: BLE001 - failing graphs are infeasible
                cache[key] = -math.inf
        return cache[key]

    rng = np.random.default_rng([seed, 14])
    init = rng.uniform(-1.0, 1.0, size=(hyper.n_particles, particle_dim(len(nodes))))
    state = pso_maximize(objective, list(init), iterations, hyper, seed)
    return SwarmFit(decode_particle(state.gbest_position, nodes), state.gbest_utility, state.history)


def _record_answer(record_or_kind, raw: str) -> str:
    if isinstance(record_or_kind, DatasetRecord):
        return answer_for(record_or_kind, raw)
    return extract_answer(raw, record_or_kind)


def vote_answers(answers: Sequence[str]) -> str | None:
    """Majority vote ignoring unextractable answers; ``None`` when nothing remains."""
    valid = [a for a in answers if a != NO_ANSWER]
    return majority_vote(valid) if valid else None


@dataclass
class FinetuneBuild:
    generation: list[dict]
    critic: list[dict]
    skipped: list[dict]
    pool: ModelPool


def multiagent_finetuning_build(pool: ModelPool, dev: Sequence[DatasetRecord], rounds: int = 1,
                                params: GenerationParams | None = None,
                                training_hook: Callable[[ModelPool, list, list], ModelPool] | None = None,
                                warnings: list | None = None) -> FinetuneBuild:
    """Collect generation and critic fine-tuning data from per-instance consensus.

    Each round every model answers every dev instance; models agreeing with
    the majority answer yield generation records, dissenters yield critic
    records. ``training_hook(pool, generation, critic)`` may return updated
    backends for the next round (fine-tuning itself happens outside).
    """
    gen, critic, skipped = [], [], []
    params = params or GenerationParams(temperature=0.0)
    for r in range(rounds):
        p = params.with_seed(params.seed + r)
        for rec in dev:
            raws = [_gen(b, rec.prompt, p, warnings) for b in pool]
            answers = [answer_for(rec, t) for t in raws]
            valid = [a for a in answers if a != NO_ANSWER]
            if not valid or (len(valid) > 1 and len(set(valid)) == len(valid)):
                skipped.append({"round": r, "id": rec.id, "answers": answers})
                continue
            consensus = majority_vote(valid)
            for b, raw, ans in zip(pool, raws, answers):
                if ans == consensus:
                    gen.append({"round": r, "model_id": b.id, "instruction": rec.prompt, "answer": consensus,
                                "response": raw})
                else:
                    critic.append({"round": r, "model_id": b.id, "instruction": rec.prompt,
                                   "wrong_answer": ans, "consensus": consensus})
        if training_hook is not None:
            pool = training_hook(pool, gen, critic)
    return FinetuneBuild(gen, critic, skipped, pool)


def debate_vote(pool: ModelPool, query: str, task_kind="open_ended", rounds: int = 2,
                params: GenerationParams | None = None, warnings: list | None = None,
                max_workers: int = 1) -> tuple[str, Transcript]:
    """Inference pipeline for fine-tuned agents: debate, then vote over the last round."""
    tr = multiagent_debate(pool, query, rounds, params=params, warnings=warnings, max_workers=max_workers)
    last = tr.answers(rounds - 1)
    winner = vote_answers([_record_answer(task_kind, m.text) for m in last])
    tr.final_answer = winner if winner is not None else (last[0].text if last else "")
    return tr.final_answer, tr


def structured_interaction(pool: ModelPool, graph: InteractionGraph, query: str, rounds: int = 2,
                           task_kind="open_ended", params: GenerationParams | None = None,
                           warnings: list | None = None, max_workers: int = 1) -> Transcript:
    """Synchronous rounds: each model updates from its in-neighbors' previous answers; final by vote."""
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    params = params or GenerationParams()
    tr = Transcript()
    prev = _initial_round(pool, query, params, tr, warnings, max_workers)
    for r in range(1, rounds + 1):
        def update(b, prev=prev):
            nbrs = [prev[n] for n in graph.incoming(b.id)]
            prompt = prompts.render("structured_update", query=query, own=prev[b.id].text,
                                    neighbors=prompts.blocks((m.model_id, m.text) for m in nbrs))
            return _gen(b, prompt, params, warnings), [prev[b.id].seq] + [m.seq for m in nbrs]
        results = parallel_map(update, pool, max_workers)
        prev = {b.id: tr.add(r, 1, b.id, "answer", t, refs) for b, (t, refs) in zip(pool, results)}
    last = [prev[b.id].text for b in pool]
    winner = vote_answers([_record_answer(task_kind, t) for t in last])
    tr.final_answer = winner if winner is not None else last[0]
    return tr


BBMAS_ACTIONS = ("propose", "extend", "critique", "revise", "synthesize")
_ACTION_RE = re.compile(r"^\s*ACTION\s*:\s*([A-Za-z]+)\s*$", re.I)


def parse_action(text: str) -> tuple[str, str]:
    lines = (text or "").strip().splitlines()
    if lines:
        m = _ACTION_RE.match(lines[0])
        if m and m.group(1).lower() in BBMAS_ACTIONS:
            return m.group(1).lower(), "\n".join(lines[1:]).strip()
    return "propose", (text or "").strip()


def render_board(board: Sequence[dict]) -> str:
    if not board:
        return "(empty)"
    return "\n".join(f"#{e['index']} [{e['model']}] {e['action']}: {e['content']}" for e in board)


@dataclass
class BlackboardResult:
    transcript: Transcript
    board: list[dict]
    votes: dict[str, int | None]
    final: str


def bbmas(pool: ModelPool, query: str, rounds: int = 2, params: GenerationParams | None = None,
          warnings: list | None = None) -> BlackboardResult:
    """Round-robin contributions to a shared blackboard, then a plurality vote on the conclusions.

    Candidates are the ``synthesize`` entries (all entries when there are
    none); entries are numbered from 1.
    """
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    params = params or GenerationParams()
    tr = Transcript()
    board: list[dict] = []
    for r in range(rounds):
        for b in pool:
            reply = _gen(b, prompts.render("bbmas_turn", query=query, board=render_board(board)), params, warnings)
            action, content = parse_action(reply)
            msg = tr.add(r, len(board), b.id, action, content, [e["seq"] for e in board])
            board.append({"index": len(board) + 1, "model": b.id, "action": action, "content": content,
                          "seq": msg.seq})
    candidates = [e for e in board if e["action"] == "synthesize"] or board
    numbers = {e["index"] for e in candidates}
    cand_text = "\n".join(f"#{e['index']} [{e['model']}]: {e['content']}" for e in candidates)
    votes: dict[str, int | None] = {}
    for b in pool:
        reply = _gen(b, prompts.render("bbmas_vote", query=query, candidates=cand_text), params, warnings)
        m = re.search(r"#\s*(\d+)", reply) or re.search(r"\b(\d+)\b", reply)
        v = int(m.group(1)) if m else None
        votes[b.id] = v if v in numbers else None
    valid = [v for v in votes.values() if v is not None]
    chosen = majority_vote(valid) if valid else candidates[-1]["index"]
    final = next(e["content"] for e in board if e["index"] == chosen)
    tr.add(rounds, 0, "blackboard", "summary", final, [e["seq"] for e in board])
    tr.final_answer = final
    return BlackboardResult(tr, board, votes, final)


def elo_expected(r_a: float, r_b: float) -> float:
    """Expected score of a player rated ``r_a`` against one rated ``r_b``."""
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


@dataclass
class ReputationState:
    ratings: dict[str, float]
    history: list[dict] = field(default_factory=list)
    k_factor: float = 32.0

    @classmethod
    def initial(cls, ids: Iterable[str], rating: float = 1000.0, k_factor: float = 32.0) -> ReputationState:
        return cls({i: float(rating) for i in ids}, [], k_factor)

    def update(self, winner: str, loser: str) -> float:
        """Zero-sum Elo update; returns the points transferred."""
        delta = self.k_factor * (1.0 - elo_expected(self.ratings[winner], self.ratings[loser]))
        self.ratings[winner] += delta
        self.ratings[loser] -= delta
        return delta

    def judge_weights(self, judges: Sequence[str]) -> dict[str, float]:
        vals = {j: max(self.ratings[j], 0.0) for j in judges}
        total = math.fsum(vals.values())
        if total <= 0:
            return {j: 1.0 / len(judges) for j in judges}
        return {j: v / total for j, v in vals.items()}


@dataclass
class SpartaResult:
    state: ReputationState
    preferences: list[dict]


def sparta_collect(pool: ModelPool, instructions: Sequence, rounds: int = 1, judge_weighting: bool = True,
                   seed: int = 0, params: GenerationParams | None = None, state: ReputationState | None = None,
                   warnings: list | None = None) -> SpartaResult:
    """Tournament of paired responses judged by the remaining models.

    Per round and instruction: sample two contestants uniformly without
    replacement, let every other model vote "A" or "B" weighted by its share
    of the judges' ratings (abstentions drop out), resolve ties toward A,
    apply an Elo update and record the preference pair.
    """
    if len(pool) < 3:
        raise ArgumentError("sparta needs two contestants and at least one judge")
    params = params or GenerationParams()
    state = state or ReputationState.initial(pool.ids)
    rng = np.random.default_rng(seed)
    prefs = []
    for r in range(rounds):
        for inst in instructions:
            query = inst.prompt if isinstance(inst, DatasetRecord) else str(inst)
            i, j = rng.choice(len(pool), size=2, replace=False)
            a, b = pool[int(i)], pool[int(j)]
            ta, tb = _gen(a, query, params, warnings), _gen(b, query, params, warnings)
            judges = [m for m in pool if m.id not in (a.id, b.id)]
            weights = state.judge_weights([m.id for m in judges]) if judge_weighting else \
                {m.id: 1.0 for m in judges}
            score = {"A": 0.0, "B": 0.0}
            verdicts = {}
            for jm in judges:
                reply = _gen(jm, prompts.render("sparta_judge", query=query, a=ta, b=tb),
                             GenerationParams(max_new_tokens=16, temperature=0.0, seed=params.seed), warnings)
                v = parse_ab(reply)
                verdicts[jm.id] = v
                if v is not None:
                    score[v] += weights[jm.id]
            a_wins = score["A"] >= score["B"]
            winner, loser = (a, b) if a_wins else (b, a)
            before = dict(state.ratings)
            state.update(winner.id, loser.id)
            rec = {"round": r, "instruction": query, "chosen": ta if a_wins else tb,
                   "rejected": tb if a_wins else ta, "winner_id": winner.id, "loser_id": loser.id,
                   "verdicts": verdicts, "ratings_before": before, "ratings_after": dict(state.ratings)}
            state.history.append(rec)
            prefs.append(rec)
    return SpartaResult(state, prefs)


def agglm_aggregate(aggregator: ModelBackend, query: str, responses: Sequence[str],
                    params: GenerationParams | None = None, warnings: list | None = None) -> str:
    """Aggregator model reads the query and every candidate response."""
    if not responses:
        raise ArgumentError("agglm needs at least one response")
    prompt = prompts.render("agglm", query=query,
                            responses=prompts.blocks((f"response {i + 1}", t) for i, t in enumerate(responses)))
    return _gen(aggregator, prompt, params or GenerationParams(), warnings)


def agglm_build_splits(pool: ModelPool, dev: Sequence[DatasetRecord], params: GenerationParams | None = None,
                       answers: dict[str, Sequence[str]] | None = None
                       ) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Partition dev into (hard, easy): majority vote wrong vs right.

    ``answers`` optionally supplies raw pool outputs per record id.
    """
    params = params or GenerationParams(temperature=0.0)
    hard, easy = [], []
    for rec in dev:
        raws = answers[rec.id] if answers is not None else [_gen(b, rec.prompt, params, None) for b in pool]
        winner = vote_answers([answer_for(rec, t) for t in raws])
        ok = winner is not None and score_instance(rec, winner) == 1.0
        (easy if ok else hard).append(rec)
    return hard, easy
