"""HTTP front end: /retrieve, /rerank, /answer, /health over an immutable pipeline snapshot."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from .generate import Pipeline, PipelineError, PipelineSettings, strip_timings
from .runtime import rerank_payload, retrieve_payload


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RetrieveRequest(_Strict):
    query: str = Field(min_length=1)
    n: int | None = Field(default=None, ge=1)


class StageRequest(_Strict):
    query: str = Field(min_length=1)
    n_retrieve: int | None = Field(default=None, ge=1)
    n_rerank: int | None = Field(default=None, ge=1)
    k_keep: int | None = Field(default=None, ge=1)


def create_app(pipeline: Pipeline, defaults: PipelineSettings = PipelineSettings()) -> FastAPI:
    app = FastAPI(title="tablesearch")

    def settings(req: StageRequest) -> PipelineSettings:
        return PipelineSettings(
            n_retrieve=req.n_retrieve or defaults.n_retrieve,
            n_rerank=req.n_rerank or defaults.n_rerank,
            k_keep=req.k_keep or defaults.k_keep,
        )

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        errors = [{"field": ".".join(str(p) for p in e["loc"] if p != "body"), "message": e["msg"]}
                  for e in exc.errors()]
        return JSONResponse(status_code=400, content={"error": "invalid request", "details": errors})

    @app.exception_handler(PipelineError)
    async def _pipeline_failed(request: Request, exc: PipelineError):
        return JSONResponse(status_code=422, content={"error": str(exc), "stage": exc.stage})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "index_size": len(pipeline.index), "params_version": pipeline.params.version}

    # plain (sync) handlers run in the threadpool; the snapshot is read-only
    @app.post("/retrieve")
    def retrieve(req: RetrieveRequest):
        return retrieve_payload(pipeline, req.query, req.n or defaults.n_retrieve)

    @app.post("/rerank")
    def rerank(req: StageRequest):
        return rerank_payload(pipeline, req.query, settings(req))

    @app.post("/answer")
    def answer(req: StageRequest):
        ans, trace = pipeline.answer(req.query, settings(req))
        return {"answer": ans.to_json(), "trace": strip_timings(trace)}

    return app
