"""Session-based inference service over the trained checkpoints.

Frames travel as base64 PNG, actions as integer code-index arrays. Each
session owns a seed that advances per step, so replaying an action history
reproduces the rollout exactly; step requests carry a request id and are
idempotent under retry. Session state is single-writer behind a lock.
"""

from __future__ import annotations

import base64
import io
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel

from . import pipeline, worldgen
from .config import RunConfig
from .errors import MissingArtifact
from .lam import LatentAction
from .policy import policy_forward, snap_to_codebook
from .worldmodel import apply_action_sequence

KNOWN_CHECKPOINTS = ("lam", "world", "policy")


def frame_to_png_b64(frame: np.ndarray) -> str:
    img = Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_frame(data: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


class SourceSpec(BaseModel):
    dataset: str | None = None
    clip: int = 0
    frame: int = 0
    png: str | None = None


class CreateSessionRequest(BaseModel):
    source: SourceSpec
    checkpoints: dict[str, str] | None = None
    seed: int = 0
    request_id: str | None = None


class StepRequest(BaseModel):
    indices: list[int] | None = None
    instruction: str | None = None
    suggest_from_instruction: str | None = None
    request_id: str


class SuggestRequest(BaseModel):
    instruction: str


class ExtractRequest(BaseModel):
    obs_png: str
    goal_png: str


@dataclass
class Session:
    session_id: str
    seed: int
    frames: list[np.ndarray]
    actions: list[list[int]] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    step_cache: dict[str, dict] = field(default_factory=dict)


def tokenize_instruction(text: str) -> list[int]:
    tokens = []
    for word in text.strip().upper().split():
        if word not in worldgen.VOCAB:
            raise HTTPException(status_code=400, detail=f"unknown instruction word {word!r}")
        tokens.append(worldgen.VOCAB[word])
    if not tokens:
        raise HTTPException(status_code=400, detail="empty instruction")
    return tokens


def create_app(cfg: RunConfig) -> FastAPI:
    app = FastAPI(title="lamworld inference service")
    try:
        lam_model = pipeline.load_lam(cfg)
        world = pipeline.load_world(cfg)
        policy = pipeline.load_policy(cfg)
    except MissingArtifact as exc:
        raise SystemExit(f"cannot start service: {exc}") from exc

    state = {"sessions": {}, "counter": 0, "create_cache": {}}
    registry_lock = threading.Lock()
    n_tokens = cfg.codebook.num_tokens
    codebook_size = cfg.codebook.codebook_size

    def _initial_frame(source: SourceSpec) -> np.ndarray:
        if source.png is not None:
            frame = png_b64_to_frame(source.png)
        elif source.dataset is not None:
            try:
                clips = pipeline.load_clips(cfg, source.dataset)
            except MissingArtifact as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            if not (0 <= source.clip < len(clips)):
                raise HTTPException(status_code=400, detail="clip index out of range")
            clip = clips[source.clip]
            if not (0 <= source.frame < clip.length):
                raise HTTPException(status_code=400, detail="frame index out of range")
            frame = clip.frames[source.frame]
        else:
            raise HTTPException(status_code=400, detail="source needs a dataset ref or a png")
        expected = (cfg.data.height, cfg.data.width, cfg.data.channels)
        if frame.shape != expected:
            raise HTTPException(status_code=400, detail=f"frame shape {frame.shape} != {expected}")
        return frame.astype(np.float32)

    def _get_session(session_id: str) -> Session:
        session = state["sessions"].get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return session

    def _validate_checkpoints(requested: dict[str, str] | None) -> None:
        if not requested:
            return
        for role, name in requested.items():
            if role not in KNOWN_CHECKPOINTS or name not in KNOWN_CHECKPOINTS:
                raise HTTPException(status_code=400, detail=f"unknown checkpoint id {role}:{name}")

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest) -> dict:
        _validate_checkpoints(req.checkpoints)
        frame = _initial_frame(req.source)
        with registry_lock:
            if req.request_id and req.request_id in state["create_cache"]:
                return state["create_cache"][req.request_id]
            state["counter"] += 1
            session_id = f"s{state['counter']:06d}"
            session = Session(session_id=session_id, seed=req.seed, frames=[frame])
            state["sessions"][session_id] = session
            response = {"session_id": session_id, "frame_png": frame_to_png_b64(frame)}
            if req.request_id:
                state["create_cache"][req.request_id] = response
        return response

    def _step_indices(session: Session, indices: list[int]) -> np.ndarray:
        embedding = lam_model.vq.lookup(torch.tensor(indices)).numpy().astype(np.float32)
        action = LatentAction(indices=tuple(indices), embedding=embedding)
        step_seed = session.seed * 100_000 + len(session.actions)
        rollout = apply_action_sequence(
            session.frames[-1], [action], world, lam_model, seed=step_seed
        )
        return rollout[-1]

    @app.post("/sessions/{session_id}/step")
    def step_session(session_id: str, req: StepRequest) -> dict:
        session = _get_session(session_id)
        instruction = req.instruction or req.suggest_from_instruction
        if (req.indices is None) == (instruction is None):
            raise HTTPException(
                status_code=400, detail="provide exactly one of indices or instruction"
            )
        with session.lock:
            if req.request_id in session.step_cache:
                return session.step_cache[req.request_id]
            start = time.perf_counter()
            if req.indices is not None:
                indices = [int(i) for i in req.indices]
                if len(indices) != n_tokens or any(
                    not (0 <= i < codebook_size) for i in indices
                ):
                    raise HTTPException(
                        status_code=400,
                        detail=f"indices must be {n_tokens} integers in [0, {codebook_size})",
                    )
            else:
                tokens = tokenize_instruction(instruction)
                ctx = np.stack(session.frames[-policy.cfg.context :])
                out = policy_forward(policy, tokens, ctx, lam_model)
                indices = [int(i) for i in out.snapped.indices]
            frame = _step_indices(session, indices)
            session.frames.append(frame)
            session.actions.append(indices)
            response = {
                "frame_png": frame_to_png_b64(frame),
                "indices": indices,
                "latency_ms": (time.perf_counter() - start) * 1000.0,
            }
            session.step_cache[req.request_id] = response
            return response

    @app.post("/sessions/{session_id}/suggest")
    def suggest(session_id: str, req: SuggestRequest) -> dict:
        """Policy suggestion without stepping, so a client can edit first."""
        session = _get_session(session_id)
        tokens = tokenize_instruction(req.instruction)
        with session.lock:
            ctx = np.stack(session.frames[-policy.cfg.context :])
        out = policy_forward(policy, tokens, ctx, lam_model)
        return {"indices": [int(i) for i in out.snapped.indices]}

    @app.get("/codebook")
    def codebook() -> dict:
        return {
            "size": codebook_size,
            "num_tokens": n_tokens,
            "usage_counts": lam_model.vq.usage_counts.tolist(),
        }

    @app.post("/extract")
    def extract(req: ExtractRequest) -> dict:
        obs = png_b64_to_frame(req.obs_png)
        goal = png_b64_to_frame(req.goal_png)
        expected = (cfg.data.height, cfg.data.width, cfg.data.channels)
        if obs.shape != expected or goal.shape != expected:
            raise HTTPException(status_code=400, detail=f"rasters must have shape {expected}")
        window = torch.from_numpy(np.stack([obs, goal]))
        action = lam_model.idm_forward(window)
        return {"indices": [int(i) for i in action.indices]}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        session = _get_session(session_id)
        with session.lock:
            return {
                "session_id": session.session_id,
                "seed": session.seed,
                "frames": [frame_to_png_b64(f) for f in session.frames],
                "actions": [list(a) for a in session.actions],
            }

    return app
