"""Two-stage policy: instruction encoding, causality, freeze contract, rollouts."""

import numpy as np
import pytest
import torch

from lamworld import checkpoints, lam, policy, worldgen
from lamworld.errors import VocabularyError
from lamworld.lam import LamConfig, LatentActionModel
from lamworld.nnkit import CodebookConfig
from lamworld.policy import (
    FoundationPolicy,
    LowLevelPolicy,
    PolicyConfig,
    PolicyTrainConfig,
    pad_instruction,
    policy_forward,
    snap_to_codebook,
)
from lamworld.worldgen import ActionKind, Embodiment

TINY_LAM = LamConfig(
    codebook=CodebookConfig(num_tokens=4, codebook_size=16, code_dim=32),
    width=32,
    heads=4,
    idm_blocks=1,
    fdm_blocks=1,
)
TINY_POLICY = PolicyConfig(lam=TINY_LAM, width=32, heads=4, blocks=1)


@pytest.fixture(scope="module")
def lam_model():
    torch.manual_seed(0)
    m = LatentActionModel(TINY_LAM)
    m.eval()
    return m


@pytest.fixture(scope="module")
def foundation():
    torch.manual_seed(1)
    m = FoundationPolicy(TINY_POLICY)
    m.eval()
    return m


@pytest.fixture(scope="module")
def clips():
    return [worldgen.generate_episode(i, Embodiment.ARM_A, 10) for i in range(3)]


# -- instruction encoding ---------------------------------------------------------


def test_instruction_table_lookup(foundation):
    enc = foundation.instruction_encoder
    ids = torch.tensor([[0, 1]])
    out = enc(ids)
    assert out.shape == (1, 2, 32)
    assert torch.equal(out[0, 0], enc.table.weight[0])


def test_instruction_same_twice_identical(foundation):
    ids = torch.tensor([pad_instruction([worldgen.VOCAB["MOVE"], worldgen.VOCAB["LEFT"]])])
    a = foundation.instruction_encoder(ids)
    b = foundation.instruction_encoder(ids.clone())
    assert torch.equal(a, b)


def test_instructions_differ_only_at_changed_position(foundation):
    left = torch.tensor([pad_instruction([worldgen.VOCAB["MOVE"], worldgen.VOCAB["LEFT"]])])
    right = torch.tensor([pad_instruction([worldgen.VOCAB["MOVE"], worldgen.VOCAB["RIGHT"]])])
    a = foundation.instruction_encoder(left)
    b = foundation.instruction_encoder(right)
    assert torch.equal(a[0, 0], b[0, 0])
    assert not torch.equal(a[0, 1], b[0, 1])


def test_unknown_token_rejected():
    with pytest.raises(VocabularyError):
        pad_instruction([99])
    with pytest.raises(VocabularyError):
        pad_instruction([])


# -- foundation policy --------------------------------------------------------------


def test_policy_output_shape(foundation, clips, lam_model):
    out = policy_forward(foundation, clips[0].instruction, clips[0].frames[:2], lam_model)
    assert out.predicted.shape == (4, 32)
    assert out.snapped is not None
    assert len(out.snapped.indices) == 4
    rows = lam_model.vq.lookup(torch.tensor(out.snapped.indices)).numpy()
    assert np.array_equal(out.snapped.embedding, rows)


def test_policy_causality(foundation, clips):
    ids = torch.tensor([pad_instruction(clips[0].instruction)])
    frames = torch.from_numpy(clips[0].frames[:4]).unsqueeze(0)
    with torch.no_grad():
        base = foundation(ids, frames)
    perturbed = frames.clone()
    perturbed[:, 3] = torch.rand_like(perturbed[:, 3])
    with torch.no_grad():
        out = foundation(ids, perturbed)
    assert torch.equal(base[:, :3], out[:, :3])
    assert not torch.equal(base[:, 3], out[:, 3])


def test_snap_produces_codebook_rows(foundation, lam_model):
    g = torch.Generator().manual_seed(2)
    pred = torch.randn(4, 32, generator=g)
    snapped = snap_to_codebook(pred, lam_model)
    codes = lam_model.vq.codes.detach().numpy()
    for i, row in zip(snapped.indices, snapped.embedding):
        assert np.array_equal(row, codes[i])


# -- stage-1 training -----------------------------------------------------------------


def test_train_policy_deterministic(clips, lam_model):
    labels = lam.label_dataset(clips, lam_model, gap=3)
    tc = PolicyTrainConfig(batch_size=4, steps=4, seed=9)
    m1, c1 = policy.train_policy(clips, labels, lam_model, TINY_POLICY, tc, log_every=0)
    m2, c2 = policy.train_policy(clips, labels, lam_model, TINY_POLICY, tc, log_every=0)
    assert c1.total == c2.total
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)


def test_policy_loss_matches_eq_recomputation(clips, lam_model, foundation):
    """Mean squared distance between prediction and label embedding."""
    labels = lam.label_dataset(clips, lam_model, gap=3)
    windows = policy.PolicyWindows(clips, labels, TINY_POLICY)
    ids, frames, targets = windows.batch([0, 1, 2], lam_model)
    with torch.no_grad():
        pred = foundation(ids, frames)[:, -1]
    loss = torch.nn.functional.mse_loss(pred, targets)
    ref = float(((pred.numpy() - targets.numpy()) ** 2).mean())
    assert float(loss) == pytest.approx(ref, abs=1e-7)


def test_zero_steps_training_is_noop(clips, lam_model):
    labels = lam.label_dataset(clips, lam_model, gap=3)
    tc = PolicyTrainConfig(batch_size=4, steps=0, seed=9)
    m1, _ = policy.train_policy(clips, labels, lam_model, TINY_POLICY, tc, log_every=0)
    torch.manual_seed(9)
    reference = FoundationPolicy(TINY_POLICY)
    assert checkpoints.module_digest(m1) == checkpoints.module_digest(reference)


# -- low-level policy ------------------------------------------------------------------


def test_lowlevel_chunk_shape(foundation, clips):
    torch.manual_seed(3)
    low = LowLevelPolicy(TINY_POLICY, foundation, use_latent=True)
    chunk = policy.lowlevel_forward(low, clips[0].instruction, clips[0].frames[:2])
    assert chunk.shape == (3, 3)


def test_lowlevel_freeze_contract(foundation, clips):
    """Finetuning must not change one byte of the upper stack."""
    digest_before = checkpoints.module_digest(foundation)
    tc = PolicyTrainConfig(batch_size=4, steps=5, seed=4)
    model, _ = policy.train_lowlevel(clips, TINY_POLICY, tc, foundation, use_latent=True, log_every=0)
    assert checkpoints.module_digest(foundation) == digest_before
    assert checkpoints.module_digest(model.foundation) == digest_before


def test_lowlevel_scratch_has_no_latent_input(clips):
    torch.manual_seed(5)
    scratch = LowLevelPolicy(TINY_POLICY, None, use_latent=False)
    assert scratch.latent_in is None
    chunk = policy.lowlevel_forward(scratch, clips[0].instruction, clips[0].frames[:2])
    assert chunk.shape == (3, 3)
    # everything is trainable in the scratch variant
    assert all(p.requires_grad for p in scratch.parameters())


def test_chunk_targets_oracle(clips):
    clip = clips[0]
    targets = policy.chunk_targets(clip, 0, 3)
    for k in range(3):
        a = clip.gt_actions[k]
        sy, sx = worldgen.KIND_DELTAS[a.kind]
        assert targets[k][0] == sx * a.magnitude
        assert targets[k][1] == sy * a.magnitude
        assert targets[k][2] == (1.0 if a.kind is ActionKind.GRAB else -1.0)


# -- environment rollout ----------------------------------------------------------------


def test_env_rollout_and_success_metric(clips):
    torch.manual_seed(6)
    scratch = LowLevelPolicy(TINY_POLICY, None, use_latent=False)
    state, _ = worldgen.initial_state(123, Embodiment.ARM_A)
    states, frames = policy.rollout_policy_in_env(
        clips[0].instruction, state, scratch, horizon=2, gap=3
    )
    assert len(states) == 1 + 2 * TINY_POLICY.chunk_len
    assert frames.shape[0] == len(states)


def test_env_task_success_direction():
    state, _ = worldgen.initial_state(7, Embodiment.ARM_A)
    moved = worldgen.step_state(state, dy=0.0, dx=-4.0, grab=False)
    assert policy.env_task_success([state, moved], ActionKind.LEFT)
    assert not policy.env_task_success([state, moved], ActionKind.RIGHT)
    assert not policy.env_task_success([state, state], ActionKind.LEFT)


def test_rollout_policy_in_world_zero_horizon(foundation, lam_model, clips):
    from lamworld.worldmodel import WorldModel, WorldModelConfig

    torch.manual_seed(8)
    world = WorldModel(WorldModelConfig(lam=TINY_LAM, width=32, heads=4, blocks=1))
    world.eval()
    frames = policy.rollout_policy_in_world(
        clips[0].instruction, clips[0].frames[0], foundation, lam_model, world, horizon=0
    )
    assert frames.shape == (1, 32, 32, 3)
    assert np.array_equal(frames[0], clips[0].frames[0])
