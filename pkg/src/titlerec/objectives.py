"""Training objectives: token masking, pair sampling, losses, optimizer.

Two objectives are trained jointly. Masked-token prediction hides 15% of
the word tokens in a title (80% [MASK], 10% random word, 10% unchanged)
and scores the model's distribution at those positions. Next-purchase
prediction encodes two titles as a pair and asks the CLS head whether the
second item was bought in the same session as the first; negatives are
drawn at random from the inventory. The joint loss is the plain sum of
the two terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .corpus import SessionGroup
from .errors import (
    EmptyBatchError,
    EmptyPlanError,
    InventoryTooSmallError,
    NonFiniteComponentError,
    NothingToMaskError,
    UnknownArticleError,
)
from .tokenizer import FIRST_WORD_ID, MASK_ID, TokenSequence, Vocabulary, encode_pair

MASK_REPLACE = "MASK"
RANDOM_REPLACE = "RANDOM"
KEEP_REPLACE = "KEEP"

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MaskingPlan:
    """Which positions were hidden, their original ids, and how each was hidden."""

    positions: tuple[int, ...]
    labels: tuple[int, ...]
    replacement_kinds: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.positions) == len(self.labels) == len(self.replacement_kinds)):
            raise ValueError("positions, labels and replacement_kinds must have equal length")

    def targets(self) -> list[tuple[int, int]]:
        return list(zip(self.positions, self.labels))


@dataclass(frozen=True)
class TrainingPair:
    seed_article_id: str
    candidate_article_id: str
    label: int


@dataclass
class LossRecord:
    step: int
    mlm_sum: float
    np_sum: float
    mlm_mean: float
    np_mean: float
    total: float


def masked_count(n_maskable: int) -> int:
    """max(1, round(0.15 n)) with exact half-up rounding in integer math."""
    return max(1, (3 * n_maskable + 10) // 20)


def apply_masking(
    seq: TokenSequence, vocab: Vocabulary, rng: np.random.Generator
) -> tuple[TokenSequence, MaskingPlan]:
    """Hide 15% of word tokens (at least one) and record the plan.

    Only ids >= FIRST_WORD_ID are candidates, so specials and padding are
    never touched. Draw order per plan: one choice() for the position set,
    then per selected position (ascending) one uniform for the replacement
    kind and, for RANDOM only, one integer for the substitute word.
    """
    maskable = [i for i, t in enumerate(seq.ids) if t >= FIRST_WORD_ID]
    if not maskable:
        raise NothingToMaskError("sequence has no maskable word tokens")
    count = masked_count(len(maskable))
    positions = sorted(rng.choice(len(maskable), size=count, replace=False))
    new_ids = list(seq.ids)
    plan_positions, labels, kinds = [], [], []
    for slot in positions:
        position = maskable[slot]
        draw = rng.random()
        if draw < 0.8:
            kind = MASK_REPLACE
            new_ids[position] = MASK_ID
        elif draw < 0.9:
            kind = RANDOM_REPLACE
            new_ids[position] = int(rng.integers(FIRST_WORD_ID, len(vocab)))
        else:
            kind = KEEP_REPLACE
        plan_positions.append(position)
        labels.append(seq.ids[position])
        kinds.append(kind)
    masked = TokenSequence(tuple(new_ids), seq.segments, seq.attn_mask)
    return masked, MaskingPlan(tuple(plan_positions), tuple(labels), tuple(kinds))


def sample_pairs(
    sessions: list[SessionGroup],
    inventory: list[str],
    negatives_per_positive: int,
    rng: np.random.Generator,
) -> list[TrainingPair]:
    """Positives from co-purchases, negatives rejection-sampled from inventory.

    Every ordered pair of distinct articles in a session yields one positive
    (duplicate purchases collapse first); each positive is followed by its
    negatives in the output, so the list order is reproducible. A session
    whose articles cover the whole inventory leaves no legal negative and
    raises, but only if it actually produced a positive.
    """
    if not inventory:
        raise InventoryTooSmallError("inventory is empty")
    if negatives_per_positive < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    pairs: list[TrainingPair] = []
    for session in sessions:
        unique_ids = list(dict.fromkeys(session.article_ids))
        if len(unique_ids) < 2:
            continue
        session_set = set(unique_ids)
        if all(article in session_set for article in inventory):
            raise InventoryTooSmallError(
                f"session ({session.customer_id}, {session.t_dat}) covers the whole inventory"
            )
        for seed in unique_ids:
            for candidate in unique_ids:
                if candidate == seed:
                    continue
                pairs.append(TrainingPair(seed, candidate, 1))
                for _ in range(negatives_per_positive):
                    while True:
                        negative = inventory[int(rng.integers(0, len(inventory)))]
                        if negative not in session_set:
                            break
                    pairs.append(TrainingPair(seed, negative, 0))
    return pairs


def binary_cross_entropy(prob: float, label: int) -> float:
    """BCE of one prediction with the probability clamped away from 0 and 1."""
    clamped = min(max(prob, PROB_FLOOR), 1.0 - PROB_FLOOR)
    return -float(np.log(clamped)) if label == 1 else -float(np.log1p(-clamped))


def mlm_loss(params: enc.EncoderParams, masked_seq: TokenSequence, plan: MaskingPlan) -> float:
    """Summed negative log-likelihood of the true tokens at the plan positions."""
    if not plan.positions:
        raise EmptyPlanError("masking plan selects no positions")
    trace = enc.forward(params, masked_seq, record=False)
    loss, _ = enc.sequence_loss(params, trace, plan.targets(), np_label=None)
    return loss


def np_loss(
    params: enc.EncoderParams,
    pairs: list[TrainingPair],
    titles: dict[str, str],
    vocab: Vocabulary,
) -> float:
    """Summed binary cross-entropy of the pair head over a batch of pairs."""
    total = 0.0
    for seq, label in encode_training_pairs(pairs, titles, vocab, params.config.max_len):
        trace = enc.forward(params, seq, record=False)
        total += binary_cross_entropy(enc.np_probability(params, trace), label)
    return total


def joint_loss(mlm_component: float, np_component: float) -> float:
    """The training objective: an unweighted sum of the two loss terms."""
    for value in (mlm_component, np_component):
        if not np.isfinite(value):
            raise NonFiniteComponentError(f"loss component {value} is not finite")
        if value < 0.0:
            raise ValueError(f"loss component {value} is negative")
    return mlm_component + np_component


def encode_training_pairs(
    pairs: list[TrainingPair],
    titles: dict[str, str],
    vocab: Vocabulary,
    max_len: int,
) -> list[tuple[TokenSequence, int]]:
    """Resolve article ids to titles and encode each pair for the encoder."""
    if not pairs:
        raise EmptyBatchError("pair batch is empty")
    encoded = []
    for pair in pairs:
        for article_id in (pair.seed_article_id, pair.candidate_article_id):
            if article_id not in titles:
                raise UnknownArticleError(f"article {article_id} has no prepared title")
        seq = encode_pair(
            titles[pair.seed_article_id], titles[pair.candidate_article_id], vocab, max_len
        )
        encoded.append((seq, pair.label))
    return encoded


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators, one pair per parameter tensor."""

    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]


def init_optimizer(
    params: enc.EncoderParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptimizerState:
    return OptimizerState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        step=0,
        first_moment=enc.zero_grads(params),
        second_moment=enc.zero_grads(params),
    )


def adam_update(
    params: enc.EncoderParams, state: OptimizerState, grads: dict[str, np.ndarray]
) -> None:
    """One bias-corrected adaptive-moment step, applied to params in place."""
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, grad in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        params[name] -= (
            state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        )


def train_step(
    params: enc.EncoderParams,
    state: OptimizerState,
    masked_batch: list[tuple[TokenSequence, MaskingPlan]],
    pair_batch: list[tuple[TokenSequence, int]],
) -> tuple[enc.EncoderParams, OptimizerState, LossRecord]:
    """One optimization step over a mixed batch.

    Each loss term is summed over its items and divided by its own count
    (masked positions and pairs respectively) so the two stay on comparable
    scales; the recorded total is the sum of the two means. Gradients are
    accumulated in batch order, masked sequences first, to keep the
    reduction deterministic.
    """
    if not masked_batch and not pair_batch:
        raise EmptyBatchError("train_step needs at least one sequence")
    total_masked = sum(len(plan.positions) for _, plan in masked_batch)
    if masked_batch and total_masked == 0:
        raise EmptyPlanError("masked batch carries no masked positions")
    mlm_scale = 1.0 / total_masked if total_masked else 0.0
    np_scale = 1.0 / len(pair_batch) if pair_batch else 0.0

    grad_total = enc.zero_grads(params)
    mlm_sum = 0.0
    np_sum = 0.0
    for seq, plan in masked_batch:
        trace = enc.forward(params, seq)
        seq_mlm, _, grads = enc.loss_and_grads(
            params, trace, plan.targets(), np_label=None, mlm_scale=mlm_scale
        )
        mlm_sum += seq_mlm
        for name, grad in grads.items():
            grad_total[name] += grad
    for seq, label in pair_batch:
        trace = enc.forward(params, seq)
        _, seq_np, grads = enc.loss_and_grads(
            params, trace, [], np_label=label, np_scale=np_scale
        )
        np_sum += seq_np
        for name, grad in grads.items():
            grad_total[name] += grad

    adam_update(params, state, grad_total)
    mlm_mean = mlm_sum * mlm_scale
    np_mean = np_sum * np_scale
    record = LossRecord(
        step=state.step,
        mlm_sum=mlm_sum,
        np_sum=np_sum,
        mlm_mean=mlm_mean,
        np_mean=np_mean,
        total=joint_loss(mlm_mean, np_mean),
    )
    return params, state, record
