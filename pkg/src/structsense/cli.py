"""Command-line client for the virtual-sensing service.

Every verb is a thin HTTP call. By default the service runs in-process
against ``--workspace``; pass ``--server URL`` to talk to a deployed
instance instead. Long jobs (training, full experiments) are polled and
their progress echoed.

Exit codes: 0 success, 2 validation problem, 3 filter or rollout
divergence, 1 anything else.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
from pathlib import Path

import click
import httpx

from .experiments import PRESETS
from .training import TrainingConfig

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_OTHER = 1

POLL_SECONDS = 1.0


@dataclasses.dataclass
class Settings:
    workspace: Path
    server: str | None


def _die(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


def _check(response: httpx.Response) -> dict:
    if response.is_success:
        return response.json()
    try:
        body = response.json()
        detail = body.get("detail", response.text)
    except ValueError:
        detail = response.text
    if response.status_code == 409:
        _die(EXIT_DIVERGENCE, str(detail))
    if response.status_code in (400, 404, 422):
        _die(EXIT_VALIDATION, str(detail))
    _die(EXIT_OTHER, f"HTTP {response.status_code}: {detail}")


def _client(settings: Settings) -> httpx.AsyncClient:
    if settings.server is None:
        from .service import create_app

        transport = httpx.ASGITransport(app=create_app(settings.workspace))
        return httpx.AsyncClient(
            transport=transport, base_url="http://service", timeout=None
        )
    return httpx.AsyncClient(base_url=settings.server, timeout=None)


def _call(settings: Settings, method: str, path: str, payload: dict | None = None) -> dict:
    async def go() -> dict:
        async with _client(settings) as client:
            response = await client.request(method, path, json=payload)
            return _check(response)

    return asyncio.run(go())


def _render_progress(progress: dict | None) -> str:
    if not progress:
        return ""
    if "epoch" in progress:
        epoch, cap = progress.get("epoch"), progress.get("max_epochs")
        loss = progress.get("loss")
        return f"epoch {epoch}/{cap} loss {loss:.6g}"
    return str(progress.get("stage", progress))


def _run_job(settings: Settings, path: str, payload: dict) -> dict:
    """Submit a job and poll it to completion, echoing progress lines."""

    async def go() -> dict:
        async with _client(settings) as client:
            response = await client.post(path, json=payload)
            created = _check(response)
            job_id = created["job_id"]
            click.echo(f"job {job_id} submitted")
            last = ""
            while True:
                await asyncio.sleep(POLL_SECONDS)
                status = _check(await client.get(f"/jobs/{job_id}"))
                line = _render_progress(status.get("progress"))
                if line and line != last:
                    click.echo(line)
                    last = line
                if status["status"] == "done":
                    return status["result"]
                if status["status"] == "error":
                    kind = status.get("error_kind")
                    code = {
                        "divergence": EXIT_DIVERGENCE,
                        "validation": EXIT_VALIDATION,
                    }.get(kind, EXIT_OTHER)
                    _die(code, status.get("detail") or "job failed")

    return asyncio.run(go())


def _echo_nmse(body: dict) -> None:
    click.echo(
        "NMSE  u {nmse_u:.6g}  udot {nmse_v:.6g}  uddot {nmse_a:.6g}".format(**body)
    )


@click.group()
@click.option(
    "--workspace",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("."),
    envvar="STRUCTSENSE_WORKSPACE",
    show_default=True,
    help="directory all artifact paths are relative to",
)
@click.option("--server", default=None, help="base URL of a running service")
@click.pass_context
def main(ctx: click.Context, workspace: Path, server: str | None) -> None:
    """Simulate trusses, train hybrid models, and run the virtual sensor."""
    ctx.obj = Settings(workspace=workspace, server=server)


@main.command()
@click.option("--system", type=click.Choice(["sobol", "bridge"]), default="sobol", show_default=True)
@click.option("--size", type=float, default=16, show_default=True, help="node count (sobol) or span in m (bridge)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--window", type=float, default=4.0, show_default=True, help="duration, s")
@click.option("--dt", type=float, default=0.01, show_default=True)
@click.option("--sparsity", type=float, default=75.0, show_default=True, help="percent of nodes unmeasured")
@click.option("--snr", type=float, default=25.0, show_default=True, help="measurement SNR (power ratio)")
@click.option("--noiseless", is_flag=True, help="skip measurement noise entirely")
@click.option("--amplitude", type=float, default=1.5, show_default=True, help="forcing RMS, N")
@click.option("--band", nargs=2, type=float, default=(0.5, 4.0), show_default=True, help="forcing passband, rad/s")
@click.option("--forced-count", type=int, default=4, show_default=True)
@click.option("--forcing-seed", type=int, default=None)
@click.option("--noise-seed", type=int, default=None)
@click.option("--out-prefix", default="data/run", show_default=True)
@click.pass_obj
def generate(settings: Settings, **options) -> None:
    """Sample a truss, simulate it under banded forcing, save the dataset."""
    payload = dict(options)
    if payload.pop("noiseless"):
        payload["snr"] = None
    body = _call(settings, "POST", "/generate", payload)
    click.echo(
        f"system {body['system_path']} ({body['n_nodes']} nodes, "
        f"{body['n_edges']} edges)"
    )
    click.echo(f"dataset {body['dataset_path']} ({body['n_steps']} samples)")
    click.echo("measured nodes: " + " ".join(str(k) for k in body["measured_nodes"]))


def _training_payload(config_file: str | None, options: dict) -> dict:
    """Merge a key-value config file with explicit flag overrides."""
    payload = {}
    if config_file:
        config = TrainingConfig.from_file(config_file)
        for field in (
            "loss", "learning_rate", "max_epochs", "tolerance", "patience",
            "node_latent", "edge_latent", "hidden", "message_outputs",
            "substeps", "seed",
        ):
            payload[field] = getattr(config, field)
    for key, value in options.items():
        if value is not None:
            payload[key] = value
    if "hidden" in payload and not isinstance(payload["hidden"], (list, tuple)):
        payload["hidden"] = [int(t) for t in str(payload["hidden"]).split(",") if t]
    return payload


@main.command()
@click.option("--system-path", "--system", "system_path", required=True)
@click.option("--dataset-path", "--data", "dataset_path", required=True)
@click.option("--out-model", default="model.npz", show_default=True)
@click.option("--out-history", default=None)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None, help="key-value training config file")
@click.option("--loss", type=click.Choice(["deterministic", "nll"]), default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--tolerance", type=float, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--node-latent", type=int, default=None)
@click.option("--edge-latent", type=int, default=None)
@click.option("--hidden", default=None, help="comma-separated layer widths, e.g. 64,64")
@click.option("--message-outputs", type=click.Choice(["1", "2"]), default=None)
@click.option("--substeps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--amplitude", type=float, default=None, help="forcing RMS used for feature scaling")
@click.option("--use-true-parameters", is_flag=True, help="fit against the sampled parameters instead of nominal ones")
@click.pass_obj
def train(settings: Settings, system_path, dataset_path, out_model, out_history,
          config_file, use_true_parameters, **options) -> None:
    """Fit the hybrid model to a noisy masked dataset (blocks until done)."""
    if options.get("message_outputs") is not None:
        options["message_outputs"] = int(options["message_outputs"])
    payload = _training_payload(config_file, options)
    payload.update(
        system_path=system_path,
        dataset_path=dataset_path,
        out_model=out_model,
        use_true_parameters=use_true_parameters,
    )
    if out_history:
        payload["out_history"] = out_history
    result = _run_job(settings, "/training-jobs", payload)
    click.echo(
        f"model {result['model_path']}  best loss {result['best_loss']:.6g} "
        f"at epoch {result['best_epoch']} "
        f"({result['epochs_run']} epochs, converged={result['converged']})"
    )


@main.command()
@click.option("--model-path", "--model", "model_path", required=True)
@click.option("--system-path", "--system", "system_path", required=True)
@click.option("--dataset-path", "--data", "dataset_path", required=True)
@click.option("--out", "out_path", default="open_loop.txt", show_default=True)
@click.option("--substeps", type=int, default=1, show_default=True)
@click.option("--use-true-parameters", is_flag=True)
@click.pass_obj
def predict(settings: Settings, **options) -> None:
    """Open-loop rollout of a trained model over a dataset's forcing."""
    body = _call(settings, "POST", "/predictions/rollout", dict(options))
    click.echo(f"prediction {body['out_path']}")
    _echo_nmse(body)


@main.command("filter")
@click.option("--model-path", "--model", "model_path", required=True)
@click.option("--system-path", "--system", "system_path", required=True)
@click.option("--dataset-path", "--data", "dataset_path", required=True)
@click.option("--out", "out_path", default="filtered.txt", show_default=True)
@click.option("--substeps", type=int, default=1, show_default=True)
@click.option("--epsilon-model", type=float, default=None, help="process-noise acceleration scale")
@click.option("--initial-variance", type=float, default=1e-6, show_default=True)
@click.option("--measurement-override", type=float, default=None)
@click.option("--use-true-parameters", is_flag=True)
@click.pass_obj
def filter_command(settings: Settings, **options) -> None:
    """Assimilate sparse noisy accelerations with the trained model."""
    body = _call(settings, "POST", "/predictions/filter", dict(options))
    click.echo(f"filtered {body['out_path']} (epsilon {body['epsilon_model']:.6g})")
    _echo_nmse(body)


@main.command()
@click.option("--prediction", "prediction_path", required=True)
@click.option("--dataset-path", "--data", "dataset_path", required=True)
@click.option("--kind", type=click.Choice(["rollout", "filter"]), default="rollout", show_default=True)
@click.option("--model-id", default=None)
@click.option("--case", default="custom", show_default=True)
@click.option("--squared-denominator", is_flag=True)
@click.option("--out", "out_path", default=None, help="write per-node NMSE table here")
@click.pass_obj
def evaluate(settings: Settings, **options) -> None:
    """Score a stored prediction or filter pass against its dataset."""
    body = _call(settings, "POST", "/evaluations", dict(options))
    click.echo(f"{body['model_id']} on {body['case']}")
    _echo_nmse(body)
    if body.get("per_node_path"):
        click.echo(f"per-node table {body['per_node_path']}")


@main.command()
@click.option("--run-dir", "run_dirs", multiple=True, required=True, help="experiment output directory; repeatable")
@click.option("--out", "out_path", default="report.txt", show_default=True)
@click.pass_obj
def report(settings: Settings, run_dirs, out_path) -> None:
    """Combine experiment runs into one aligned comparison table."""
    body = _call(
        settings, "POST", "/reports",
        {"run_dirs": list(run_dirs), "out_path": out_path},
    )
    click.echo(body["table"].rstrip())
    click.echo(f"written to {body['out_path']}")


@main.command("run-all")
@click.option("--preset", "preset_name", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--config-json", type=click.Path(exists=True, dir_okay=False), default=None, help="full experiment config as JSON")
@click.option("--seed", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--out-dir", default=None, help="default runs/<preset>")
@click.option("--plots", is_flag=True)
@click.pass_obj
def run_all(settings: Settings, preset_name, config_json, seed, max_epochs,
            out_dir, plots) -> None:
    """Generate, train, roll out, filter and score one experiment end to end."""
    if (preset_name is None) == (config_json is None):
        _die(EXIT_VALIDATION, "give exactly one of --preset or --config-json")
    payload: dict = {"plots": plots}
    if preset_name is not None:
        payload["preset"] = preset_name
        payload["out_dir"] = out_dir or f"runs/{preset_name}"
    else:
        payload["config"] = json.loads(Path(config_json).read_text())
        payload["out_dir"] = out_dir or "runs/experiment"
    if seed is not None:
        payload["seed"] = seed
    if max_epochs is not None:
        payload["max_epochs"] = max_epochs
    result = _run_job(settings, "/experiments", payload)
    click.echo(f"results in {result['out_dir']}")
    for model_id in ("PGGNODE", "PGGNODE-GEKF"):
        u, v, a = result[model_id]
        click.echo(f"{model_id:13s} NMSE  u {u:.6g}  udot {v:.6g}  uddot {a:.6g}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.pass_obj
def serve(settings: Settings, host: str, port: int) -> None:
    """Run the HTTP service bound to the workspace."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(settings.workspace), host=host, port=port)


if __name__ == "__main__":
    main()
