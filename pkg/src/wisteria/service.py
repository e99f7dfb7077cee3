"""FastAPI service wrapping the experiment pipelines.

Requests carry configs and input files inline; responses carry the produced
files inline (see schemas.FileEntry). That keeps the service stateless and
makes its outputs byte-reproducible functions of the request body. Config
and data errors map to HTTP 400, numerical failures to HTTP 500.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .artifacts import (
    eval_bundle,
    generate_bundle,
    report_bundle,
    sweep_bundle,
    train_bundle,
)
from .errors import ConfigError, WisteriaError
from .experiments import ExperimentConfig
from .schemas import (
    BundleResponse,
    EvalRequest,
    GenerateRequest,
    HealthResponse,
    ReportRequest,
    SweepRequest,
    TrainRequest,
    bundle_response,
)


def _required_file(files, name: str):
    if name not in files:
        raise ConfigError(f"request is missing file {name!r}")
    return files[name].to_content()


def create_app() -> FastAPI:
    app = FastAPI(title="wisteria service", version=__version__)

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(WisteriaError)
    async def _runtime_error(request: Request, exc: WisteriaError):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/generate", response_model=BundleResponse)
    def generate(req: GenerateRequest) -> BundleResponse:
        cfg = ExperimentConfig.from_dict(req.config)
        return bundle_response(generate_bundle(cfg), {"run_id": cfg.run_id()})

    @app.post("/train", response_model=BundleResponse)
    def train(req: TrainRequest) -> BundleResponse:
        cfg = ExperimentConfig.from_dict(req.config)
        bundle = train_bundle(
            cfg,
            dataset_text=_required_file(req.files, "dataset.jsonl"),
            views_blob=_required_file(req.files, "views.wstv"),
            views_sidecar_text=_required_file(req.files, "views.json"),
            graph_text=_required_file(req.files, "graph.json"),
        )
        return bundle_response(bundle, {"run_id": cfg.run_id()})

    @app.post("/eval", response_model=BundleResponse)
    def evaluate(req: EvalRequest) -> BundleResponse:
        bundle = eval_bundle(
            checkpoint_blob=_required_file(req.files, "checkpoint.ckpt"),
            dataset_text=_required_file(req.files, "dataset.jsonl"),
            graph_text=_required_file(req.files, "graph.json"),
        )
        return bundle_response(bundle)

    @app.post("/sweep", response_model=BundleResponse)
    def sweep(req: SweepRequest) -> BundleResponse:
        cfg = ExperimentConfig.from_dict(req.config)
        if req.protocol is not None and req.protocol != cfg.protocol:
            raise ConfigError(
                f"requested protocol {req.protocol!r} does not match config protocol {cfg.protocol!r}"
            )
        return bundle_response(sweep_bundle(cfg), {"run_id": cfg.run_id()})

    @app.post("/report", response_model=BundleResponse)
    def report(req: ReportRequest) -> BundleResponse:
        return bundle_response(
            report_bundle(_required_file(req.files, "aggregate.json"))
        )

    return app


app = create_app()
