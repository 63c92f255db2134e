"""Command-line client for the fusion service.

Every subcommand speaks the HTTP API. By default the app runs in-process
(no daemon needed); point `--server` at a running `trifuse serve` instance
to drive a remote service instead. Failures exit nonzero with a single
stderr line of the form `ERROR [CODE] human readable text`.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__


class ServiceClient:
    """Minimal JSON-over-HTTP client; in-process unless a server URL is given."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app(), raise_server_exceptions=False)

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        body = self._decode(response)
        if response.status_code >= 400:
            _fail(body.get("error", "HTTP"), body.get("detail", f"status {response.status_code}"))
        return body

    def get(self, path: str) -> dict:
        response = self._client.get(path)
        body = self._decode(response)
        if response.status_code >= 400:
            _fail(body.get("error", "HTTP"), body.get("detail", f"status {response.status_code}"))
        return body

    @staticmethod
    def _decode(response) -> dict:
        try:
            return response.json()
        except ValueError:
            return {"error": "HTTP", "detail": response.text[:500]}


def _fail(code: str, detail: str):
    detail = " ".join(str(detail).split())  # keep the diagnostic on one line
    click.echo(f"ERROR [{code}] {detail}", err=True)
    sys.exit(1)


def _config_payload(profile, config, sets) -> dict:
    payload = {"profile": profile, "overrides": dict(kv.split("=", 1) for kv in sets)}
    if config is not None:
        payload["config_text"] = Path(config).read_text()
    return payload


@click.group()
@click.version_option(__version__)
@click.option("--server", default=None, metavar="URL",
              help="URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx, server):
    """Tri-modal image fusion with joint super-resolution."""
    ctx.obj = server


def _client(ctx) -> ServiceClient:
    return ServiceClient(ctx.obj)


@main.command()
@click.option("--out", required=True, help="Directory for the synthetic sample tree.")
@click.option("--count", default=4, show_default=True)
@click.option("--size", default=32, show_default=True, help="Ground-truth resolution.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def synth(ctx, out, count, size, seed):
    """Generate a synthetic source tree (test data, not a fusion method)."""
    body = _client(ctx).post("/v1/dataset/synthetic",
                             {"out_dir": out, "count": count, "size": size, "seed": seed})
    click.echo(f"wrote {len(body['sample_ids'])} samples under {body['out_dir']}")


@main.command("build-dataset")
@click.option("--src", required=True, help="Source tree of per-sample directories.")
@click.option("--out", required=True, help="Output dataset directory.")
@click.option("--scales", default="2,4,8", show_default=True, help="Comma list from {2,4,8}.")
@click.option("--ratio", default="84,10,25", show_default=True, help="train,val,test split ratio.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def build_dataset_cmd(ctx, src, out, scales, ratio, seed):
    """Downsample sources per scale and write a split manifest."""
    body = _client(ctx).post("/v1/dataset/build", {
        "src_dir": src,
        "out_dir": out,
        "scales": [int(s) for s in scales.split(",")],
        "ratio": [int(r) for r in ratio.split(",")],
        "seed": seed,
    })
    sizes = body["split_sizes"]
    click.echo(f"manifest: {body['manifest_path']}")
    click.echo(f"split: train={sizes['train']} val={sizes['val']} test={sizes['test']}")
    for rej in body["rejected"]:
        click.echo(f"rejected {rej['id']}: {rej['reason']}")


@main.command()
@click.option("--data", required=True, help="Dataset directory (with manifest.json).")
@click.option("--out", required=True, help="Run directory for checkpoint and loss log.")
@click.option("--profile", default="toy", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True), help="key=value config file.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="Override a single config field (repeatable).")
@click.option("--resume", default=None, help="Checkpoint to continue from.")
@click.pass_context
def train(ctx, data, out, profile, config, sets, resume):
    """Train the denoiser on the manifest's training split."""
    payload = _config_payload(profile, config, sets)
    payload.update({"data_dir": data, "out_dir": out, "resume": resume})
    body = _client(ctx).post("/v1/train", payload)
    click.echo(f"checkpoint: {body['checkpoint_path']}")
    click.echo(f"loss log:   {body['loss_log_path']}")
    click.echo(f"steps: {body['steps']}  final loss: {body['final_loss']:.5f}  "
               f"parameters: {body['parameter_count']}")


@main.command()
@click.option("--checkpoint", required=True)
@click.option("-x", "x_path", required=True, help="First modality image.")
@click.option("-y", "y_path", required=True, help="Second modality image.")
@click.option("-s", "s_path", required=True, help="Third (functional) modality image.")
@click.option("--out", required=True, help="Output PNG path.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def fuse(ctx, checkpoint, x_path, y_path, s_path, out, seed):
    """Fuse three low-resolution modalities into one high-resolution image."""
    body = _client(ctx).post("/v1/fuse", {"checkpoint": checkpoint, "x": x_path, "y": y_path,
                                          "s": s_path, "out": out, "seed": seed})
    click.echo(f"fused: {body['out_path']} ({body['steps']} steps, {body['seconds']:.2f}s)")


@main.command("eval")
@click.option("--results", required=True, help="Directory of fused images.")
@click.option("--gt", required=True, help="Directory of reference images (same filenames).")
@click.option("--range", "value_range", default=255.0, show_default=True)
@click.option("--report", default=None, help="Write the JSON report here (plus .txt table).")
@click.option("--lpips-cmd", default=None,
              help="External perceptual scorer: invoked per pair with two file paths.")
@click.option("--allow-partial", is_flag=True, help="Score the filename intersection only.")
@click.pass_context
def eval_cmd(ctx, results, gt, value_range, report, lpips_cmd, allow_partial):
    """Score a directory of results against references."""
    body = _client(ctx).post("/v1/eval", {
        "results_dir": results, "gt_dir": gt, "value_range": value_range,
        "report_out": report, "lpips_cmd": lpips_cmd, "allow_partial": allow_partial,
    })
    click.echo(body["table"])
    if body["report_path"]:
        click.echo(f"report: {body['report_path']}")


@main.command()
@click.option("--data", required=True)
@click.option("--out", required=True)
@click.option("--profile", default="toy", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE")
@click.option("--split", default="test", show_default=True, help="Split to evaluate on.")
@click.pass_context
def ablate(ctx, data, out, profile, config, sets, split):
    """Train and score the baseline plus both single-component ablations."""
    payload = _config_payload(profile, config, sets)
    payload.update({"data_dir": data, "out_dir": out, "split": split})
    body = _client(ctx).post("/v1/ablate", payload)
    click.echo(body["table"])
    click.echo(f"summary: {body['summary_path']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
