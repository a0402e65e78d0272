"""FastAPI application exposing generation, training, prediction and filtering.

Artifacts live as files under a single workspace directory; requests refer
to them by relative path. Long-running work (training, experiments) runs
in daemon threads behind a small job registry polled via ``GET /jobs/{id}``.
"""

from __future__ import annotations

import json
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..datasets import corrupt_and_mask, load_dataset, save_dataset
from ..dynamics import ForcingSpec, lowest_nodes, simulate
from ..ekf import (
    NoiseConfig,
    filter_trajectory,
    load_filter_result,
    save_filter_result,
)
from ..errors import DivergedError, SingularInnovationError, StructSenseError
from ..experiments import (
    FILTERED_ID,
    OPEN_LOOP_ID,
    EvaluationReport,
    ExperimentConfig,
    _load_prediction,
    _save_prediction,
    emit_report,
    evaluate_series,
    preset,
    run_experiment,
)
from ..graph import GraphState, sparsity_mask
from ..metrics import nmse
from ..model import FeatureScales, create_model, load_model, rollout, save_model
from ..structures import (
    ParameterDistributions,
    generate_bridge_truss,
    generate_sobol_array,
    load_system,
    nominal_graph,
    save_system,
)
from ..training import TrainingConfig, train
from . import schemas


def _resolve(workspace: Path, relative: str) -> Path:
    candidate = (workspace / relative).resolve()
    if workspace not in candidate.parents and candidate != workspace:
        raise HTTPException(status_code=422, detail=f"path escapes workspace: {relative}")
    return candidate


def _family_distributions(kind: str) -> ParameterDistributions | None:
    if kind == "cubic":
        return ParameterDistributions.random_array_defaults()
    if kind == "clearance":
        return ParameterDistributions.bridge_defaults()
    return None


def _graph_for_model(system, use_true_parameters: bool):
    if use_true_parameters:
        return system.graph
    dists = _family_distributions(system.kind)
    if dists is None:
        return system.graph
    return nominal_graph(system, dists)


class JobRegistry:
    """Thread-backed registry of long-running jobs."""

    def __init__(self) -> None:
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()

    def create(self) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {"status": "queued", "progress": {}, "result": None}
        return job_id

    def update(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id].update(fields)

    def set_progress(self, job_id: str, **fields) -> None:
        with self._lock:
            self._jobs[job_id]["progress"].update(fields)

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return None if job is None else dict(job)

    def run(self, job_id: str, target) -> None:
        def wrapper() -> None:
            self.update(job_id, status="running")
            try:
                result = target()
            except (DivergedError, SingularInnovationError) as exc:
                self.update(job_id, status="error", detail=str(exc),
                            error_kind="divergence")
            except (StructSenseError, ValueError) as exc:
                self.update(job_id, status="error", detail=str(exc),
                            error_kind="validation")
            except Exception as exc:  # pragma: no cover - defensive
                self.update(job_id, status="error", detail=repr(exc),
                            error_kind="other")
            else:
                self.update(job_id, status="done", result=result)

        threading.Thread(target=wrapper, daemon=True).start()


def create_app(workspace) -> FastAPI:
    """Build the service bound to one workspace directory."""
    workspace = Path(workspace).resolve()
    workspace.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="structsense", version=__version__)
    app.state.workspace = workspace
    app.state.jobs = JobRegistry()

    @app.exception_handler(DivergedError)
    @app.exception_handler(SingularInnovationError)
    async def _divergence_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=409, content={"detail": str(exc),
                                                      "error_kind": "divergence"})

    @app.exception_handler(StructSenseError)
    async def _domain_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=422, content={"detail": str(exc),
                                                      "error_kind": "validation"})

    @app.exception_handler(ValueError)
    async def _value_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=422, content={"detail": str(exc),
                                                      "error_kind": "validation"})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        if req.system == "sobol":
            dists = ParameterDistributions.random_array_defaults()
            system = generate_sobol_array(int(req.size), seed=req.seed, dists=dists)
        else:
            dists = ParameterDistributions.bridge_defaults()
            system = generate_bridge_truss(float(req.size), seed=req.seed, dists=dists)
        spec = ForcingSpec(
            nodes=lowest_nodes(system.graph, req.forced_count),
            band=req.band,
            amplitude=req.amplitude,
            seed=req.forcing_seed if req.forcing_seed is not None else req.seed + 1,
        )
        truth = simulate(
            system, spec, t_end=req.window, record_every=int(round(req.dt / 1e-3))
        )
        mask = sparsity_mask(system.graph.n_nodes, req.sparsity)
        snr = np.inf if req.snr is None else req.snr
        noise_seed = req.noise_seed if req.noise_seed is not None else req.seed + 2
        dataset = corrupt_and_mask(truth, snr, mask, seed=noise_seed)
        system_path = _resolve(workspace, req.out_prefix + "_system.txt")
        dataset_path = _resolve(workspace, req.out_prefix + "_data.txt")
        system_path.parent.mkdir(parents=True, exist_ok=True)
        save_system(system_path, system)
        save_dataset(dataset_path, dataset)
        return schemas.GenerateResponse(
            system_path=str(system_path.relative_to(workspace)),
            dataset_path=str(dataset_path.relative_to(workspace)),
            n_nodes=system.graph.n_nodes,
            n_edges=system.graph.n_edges,
            n_steps=dataset.n_steps,
            measured_nodes=[int(i) for i in mask.measured_indices],
        )

    @app.post("/training-jobs", response_model=schemas.JobCreated, status_code=202)
    def start_training(req: schemas.TrainRequest):
        system = load_system(_resolve(workspace, req.system_path))
        dataset = load_dataset(_resolve(workspace, req.dataset_path))
        graph = _graph_for_model(system, req.use_true_parameters)
        config = TrainingConfig(
            loss=req.loss,
            learning_rate=req.learning_rate,
            max_epochs=req.max_epochs,
            tolerance=req.tolerance,
            patience=req.patience,
            node_latent=req.node_latent,
            edge_latent=req.edge_latent,
            hidden=req.hidden,
            message_outputs=req.message_outputs,
            substeps=req.substeps,
            seed=req.seed,
        )
        model_path = _resolve(workspace, req.out_model)
        history_path = (
            _resolve(workspace, req.out_history) if req.out_history else None
        )
        jobs: JobRegistry = app.state.jobs
        job_id = jobs.create()

        def work():
            scales = FeatureScales.for_problem(graph, req.amplitude)
            model = create_model(
                scales,
                node_latent=config.node_latent,
                edge_latent=config.edge_latent,
                hidden=config.hidden,
                message_outputs=config.message_outputs,
                seed=config.seed,
            )
            model.acc_noise_var = dataset.acc_noise_var
            model.force_noise_var = dataset.force_noise_var
            model.graph_ref = req.system_path

            def on_epoch(epoch, loss):
                jobs.set_progress(
                    job_id, epoch=epoch, loss=loss, max_epochs=config.max_epochs
                )

            result = train(model, graph, dataset, config, callback=on_epoch)
            model_path.parent.mkdir(parents=True, exist_ok=True)
            save_model(model_path, model)
            if history_path is not None:
                history_path.parent.mkdir(parents=True, exist_ok=True)
                np.savetxt(history_path, result.loss_history, fmt="%.17g")
            return {
                "model_path": str(model_path.relative_to(workspace)),
                "best_loss": result.best_loss,
                "best_epoch": result.best_epoch,
                "epochs_run": result.epochs_run,
                "converged": result.converged,
            }

        jobs.run(job_id, work)
        return schemas.JobCreated(job_id=job_id, status="queued")

    @app.get("/jobs/{job_id}", response_model=schemas.JobStatus)
    def job_status(job_id: str):
        job = app.state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no such job {job_id}")
        return schemas.JobStatus(
            job_id=job_id,
            status=job["status"],
            detail=job.get("detail"),
            error_kind=job.get("error_kind"),
            progress=job.get("progress") or None,
            result=job.get("result"),
        )

    @app.post("/predictions/rollout", response_model=schemas.RolloutResponse)
    def predict_rollout(req: schemas.RolloutRequest):
        model = load_model(_resolve(workspace, req.model_path))
        system = load_system(_resolve(workspace, req.system_path))
        dataset = load_dataset(_resolve(workspace, req.dataset_path))
        graph = _graph_for_model(system, req.use_true_parameters)
        u, v, a = rollout(
            model,
            graph,
            GraphState.zero(graph.n_nodes),
            dataset.input_forces,
            dataset.times,
            substeps=req.substeps,
        )
        out_path = _resolve(workspace, req.out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        _save_prediction(out_path, dataset.times, u, v, a)
        return schemas.RolloutResponse(
            out_path=str(out_path.relative_to(workspace)),
            nmse_u=nmse(u, dataset.displacements),
            nmse_v=nmse(v, dataset.velocities),
            nmse_a=nmse(a, dataset.accelerations),
        )

    @app.post("/predictions/filter", response_model=schemas.FilterResponse)
    def predict_filter(req: schemas.FilterRequest):
        model = load_model(_resolve(workspace, req.model_path))
        system = load_system(_resolve(workspace, req.system_path))
        dataset = load_dataset(_resolve(workspace, req.dataset_path))
        graph = _graph_for_model(system, req.use_true_parameters)
        if req.epsilon_model is not None:
            epsilon = req.epsilon_model
        else:
            # derive the knob from the observed signal scale
            obs = dataset.observed_accelerations
            epsilon = 0.1 * float(np.sqrt(np.nanmean(obs**2)))
        noise = NoiseConfig.from_dataset(
            graph,
            dataset,
            epsilon,
            initial_variance=req.initial_variance,
            measurement_override=req.measurement_override,
        )
        result = filter_trajectory(model, graph, dataset, noise, substeps=req.substeps)
        out_path = _resolve(workspace, req.out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_filter_result(out_path, result)
        return schemas.FilterResponse(
            out_path=str(out_path.relative_to(workspace)),
            nmse_u=nmse(result.displacements, dataset.displacements),
            nmse_v=nmse(result.velocities, dataset.velocities),
            nmse_a=nmse(result.accelerations, dataset.accelerations),
            epsilon_model=float(epsilon),
        )

    @app.post("/evaluations", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        dataset = load_dataset(_resolve(workspace, req.dataset_path))
        pred_path = _resolve(workspace, req.prediction_path)
        if req.kind == "filter":
            filt = load_filter_result(pred_path)
            series = (filt.displacements, filt.velocities, filt.accelerations)
            default_id = FILTERED_ID
        else:
            series = _load_prediction(pred_path)
            default_id = OPEN_LOOP_ID
        model_id = req.model_id or default_id
        report = evaluate_series(
            model_id, req.case, series[0], series[1], series[2],
            dataset, req.squared_denominator,
        )
        per_node_rel = None
        if req.out_path:
            out_path = _resolve(workspace, req.out_path)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            header = f"node {model_id}_u {model_id}_udot {model_id}_uddot"
            table = np.column_stack(
                [np.arange(report.per_node.shape[0]), report.per_node]
            )
            np.savetxt(out_path, table, fmt=["%d"] + ["%.6e"] * 3, header=header)
            per_node_rel = str(out_path.relative_to(workspace))
        return schemas.EvaluateResponse(
            model_id=model_id,
            case=req.case,
            nmse_u=report.nmse_u,
            nmse_v=report.nmse_v,
            nmse_a=report.nmse_a,
            per_node_path=per_node_rel,
        )

    @app.post("/experiments", response_model=schemas.JobCreated, status_code=202)
    def start_experiment(req: schemas.ExperimentRequest):
        if (req.preset is None) == (req.config is None):
            raise HTTPException(
                status_code=422, detail="give exactly one of preset or config"
            )
        overrides = {}
        if req.seed is not None:
            overrides["seed"] = req.seed
        if req.preset is not None:
            config = preset(req.preset, **overrides)
        else:
            config = ExperimentConfig(**{**req.config, **overrides})
        if req.max_epochs is not None:
            config.training.max_epochs = req.max_epochs
        out_dir = _resolve(workspace, req.out_dir)
        jobs: JobRegistry = app.state.jobs
        job_id = jobs.create()

        def work():
            def on_progress(message):
                jobs.set_progress(job_id, stage=message)

            open_loop, filtered = run_experiment(
                config, out_dir, plots=req.plots, progress=on_progress
            )
            return {
                "out_dir": str(out_dir.relative_to(workspace)),
                "case": config.name,
                OPEN_LOOP_ID: [open_loop.nmse_u, open_loop.nmse_v, open_loop.nmse_a],
                FILTERED_ID: [filtered.nmse_u, filtered.nmse_v, filtered.nmse_a],
            }

        jobs.run(job_id, work)
        return schemas.JobCreated(job_id=job_id, status="queued")

    @app.post("/reports", response_model=schemas.ReportResponse)
    def combined_report(req: schemas.ReportRequest):
        reports = []
        for run_dir in req.run_dirs:
            base = _resolve(workspace, run_dir)
            table_path = base / "nmse_per_node.txt"
            manifest_path = base / "manifest.json"
            if not manifest_path.exists():
                raise HTTPException(
                    status_code=422, detail=f"no manifest under {run_dir}"
                )
            manifest = json.loads(manifest_path.read_text())
            case = manifest["config"]["name"]
            per_node = np.loadtxt(table_path, ndmin=2)
            for model_id, cols in ((OPEN_LOOP_ID, (1, 4)), (FILTERED_ID, (4, 7))):
                vals = manifest["nmse"][model_id]
                reports.append(
                    EvaluationReport(
                        model_id, case, vals[0], vals[1], vals[2],
                        per_node[:, cols[0] : cols[1]],
                    )
                )
        out_path = _resolve(workspace, req.out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        emit_report(reports, out_path)
        return schemas.ReportResponse(
            out_path=str(out_path.relative_to(workspace)),
            table=out_path.read_text(),
        )

    return app
