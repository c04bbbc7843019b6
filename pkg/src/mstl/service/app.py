"""FastAPI app wrapping the training, evaluation, and scoring pipeline.

Every endpoint is a synchronous job: it reads/writes datasets and
checkpoints on the server's filesystem and returns the run summary. Domain
errors map onto HTTP statuses with a stable machine-readable code that the
CLI translates into exit codes: config -> 400/422, io -> 404,
checkpoint -> 409.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..backbone import Model, build_network
from ..errors import (
    CheckpointError,
    ConfigError,
    DataIOError,
    MstlError,
)
from ..leep import LeepInput, read_leep_csv, write_leep_report, leep_report
from ..metrics import (
    EvalResult,
    read_eval_report,
    transfer_gain,
    write_eval_report,
)
from ..phantom import PhantomSpec, generate_and_write
from ..pipeline import (
    StageConfig,
    dummy_distributions,
    evaluate,
    finetune,
    load_checkpoint,
    run_stage_ssl,
    run_stage_supervised,
    save_checkpoint,
)
from ..phantom import load_dataset
from . import schemas as S

_ERROR_CODES: list[tuple[type, str, int]] = [
    (CheckpointError, "checkpoint", 409),
    (DataIOError, "io", 404),
    (ConfigError, "config", 400),
    (MstlError, "config", 422),
]


def _error_response(exc: MstlError) -> JSONResponse:
    for etype, code, status in _ERROR_CODES:
        if isinstance(exc, etype):
            return JSONResponse(
                status_code=status,
                content={"detail": {"code": code, "message": str(exc)}},
            )
    raise exc


def _init_model(init_checkpoint: str | None, backbone: S.BackboneSpec,
                seed: int) -> Model:
    if init_checkpoint:
        model, _ = load_checkpoint(init_checkpoint)
        return model
    return build_network(backbone.to_config(), seed=seed)


def _stage_config(stage: str, req: S.TrainOptions, dataset: str) -> StageConfig:
    extra = {}
    if isinstance(req, S.SslTrainRequest):
        extra = dict(tau=req.tau, encoder_momentum=req.encoder_momentum,
                     alpha1=req.alpha1, alpha2=req.alpha2,
                     queue_capacity=req.queue_capacity,
                     queue_prefill=req.queue_prefill,
                     paper_literal_eq2=req.paper_literal_eq2)
    return StageConfig(
        stage=stage, dataset=dataset, epochs=req.epochs,
        batch_size=req.batch_size, lr=req.lr,
        lr_decay_factor=req.lr_decay_factor,
        lr_decay_epochs=tuple(req.lr_decay_epochs),
        momentum=req.momentum, weight_decay=req.weight_decay, seed=req.seed,
        flip_prob=req.flip_prob, jitter_prob=req.jitter_prob,
        gray_prob=req.gray_prob, **extra,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="mstl", version=__version__)

    @app.exception_handler(MstlError)
    async def handle_domain_error(request: Request, exc: MstlError):
        return _error_response(exc)

    @app.get("/health", response_model=S.HealthResponse)
    def health():
        return S.HealthResponse(status="ok", version=__version__)

    @app.post("/data/generate", response_model=S.GenerateDataResponse)
    def generate_data(req: S.GenerateDataRequest):
        spec = PhantomSpec(image_size=req.image_size, noise_sigma=req.noise_sigma,
                           seed=req.seed)
        ds = generate_and_write(req.kind, spec, req.n, req.out_dir)
        counts = {int(k): int(v) for k, v in
                  zip(*np.unique(ds.labels, return_counts=True))}
        return S.GenerateDataResponse(
            out_dir=req.out_dir, kind=req.kind, n=req.n, label_counts=counts,
            split_sizes={s: int(idx.size) for s, idx in ds.splits.items()},
        )

    def _train_response(model: Model, req, stage: str, history: dict) -> S.TrainResponse:
        save_checkpoint(model, req.out_checkpoint,
                        rng=np.random.default_rng(req.seed))
        return S.TrainResponse(checkpoint=req.out_checkpoint, stage=stage,
                               provenance=list(model.provenance), history=history)

    @app.post("/train/supervised", response_model=S.TrainResponse)
    def train_supervised(req: S.SupervisedTrainRequest):
        model = _init_model(req.init_checkpoint, req.backbone, req.seed)
        history = run_stage_supervised(model, _stage_config(req.stage, req, req.dataset))
        return _train_response(model, req, req.stage, history)

    @app.post("/train/ssl", response_model=S.TrainResponse)
    def train_ssl(req: S.SslTrainRequest):
        model = _init_model(req.init_checkpoint, req.backbone, req.seed)
        history = run_stage_ssl(model, _stage_config("sstl_m", req, req.dataset))
        return _train_response(model, req, "sstl_m", history)

    @app.post("/train/finetune", response_model=S.TrainResponse)
    def train_finetune(req: S.FinetuneRequest):
        model = _init_model(req.init_checkpoint, req.backbone, req.seed)
        history = finetune(model, _stage_config("finetune", req, req.dataset))
        return _train_response(model, req, "finetune", history)

    @app.post("/evaluate", response_model=S.EvalResponse)
    def evaluate_checkpoint(req: S.EvaluateRequest):
        model, _ = load_checkpoint(req.checkpoint)
        result = evaluate(model, req.dataset, req.split)
        if req.out_json:
            write_eval_report(req.out_json, result)
        return S.EvalResponse(**result.to_dict())

    @app.post("/leep", response_model=S.LeepResponse)
    def leep_endpoint(req: S.LeepRequest):
        if req.csv:
            inp = read_leep_csv(req.csv)
        elif req.checkpoint and req.dataset:
            model, _ = load_checkpoint(req.checkpoint)
            inp = dummy_distributions(model, load_dataset(req.dataset), req.split)
        else:
            raise ConfigError("leep needs either csv or checkpoint+dataset")
        report = write_leep_report(req.out_json, inp) if req.out_json else leep_report(inp)
        return S.LeepResponse(**report)

    @app.post("/report", response_model=S.ReportResponse)
    def report(req: S.ReportRequest):
        def as_result(item) -> EvalResult:
            if isinstance(item, str):
                return read_eval_report(item)
            return EvalResult.from_dict(item.model_dump())

        gain = transfer_gain(as_result(req.no_pretrain), as_result(req.pretrained))
        if req.out_json:
            Path(req.out_json).write_text(
                json.dumps(gain.to_dict(), indent=2, sort_keys=True))
        return S.ReportResponse(
            no_pretrain=S.EvalResponse(**gain.p_n.to_dict()),
            pretrained=S.EvalResponse(**gain.p_p.to_dict()),
            improvements={k: v for k, v in gain.improvements.items()},
        )

    return app


app = create_app()
