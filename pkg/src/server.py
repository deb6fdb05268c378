import asyncio
import logging
import os
import sys
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional

import anyio
import uvicorn
from dotenv import load_dotenv
from mcp.server import NotificationOptions, Server
from mcp.server.lowlevel.helper_types import ReadResourceContents
from mcp.server.models import InitializationOptions
from mcp.server.sse import SseServerTransport
from mcp.types import Resource, TextContent, Tool
from pydantic import AnyUrl
from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import JSONResponse, Response
from starlette.routing import Mount, Route

from cli import affinity_rounds, cmd_dump_affinity, cmd_eval, cmd_synth, cmd_train
from config import METHODS, STRATEGIES, config_keys, load_config, output_root
from errors import ConfigError, DatasetError
from formats import read_json, safe_json_dumps

# Configure logging to stderr for MCP debugging
logging.basicConfig(
    level=os.getenv("FEDLPPA_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)

load_dotenv()

SERVER_NAME = "fedlppa-mcp-server"
SERVER_VERSION = "0.1.0"
RESOURCE_SCHEME = "fedlppa"

TRAIN_PROPERTIES = {
    "config": {"type": "string", "description": "Path to a TOML or JSON experiment config (optional)"},
    "method": {"type": "string", "enum": list(METHODS), "description": "Training method"},
    "strategy": {"type": "string", "enum": list(STRATEGIES), "description": "Auxiliary-decoder strategy"},
    "seed": {"type": "integer", "description": "Run seed"},
    "rounds": {"type": "integer", "description": "Communication rounds"},
    "local_iters": {"type": "integer", "description": "Local iterations per round"},
    "dataset_dir": {"type": "string", "description": "Dataset directory written by synth_dataset"},
    "run_name": {"type": "string", "description": "Run directory name under the output root"},
}


class FedLPPAMCPServer:
    def __init__(self, host: Optional[str] = None, port: Optional[int] = None):
        self.host = host or os.getenv("HOST", "0.0.0.0")
        self.port = int(port or os.getenv("PORT", "8000"))
        self.server = Server(SERVER_NAME)
        # One training or synthesis job at a time; they share the output root
        self.job_lock = threading.Lock()

        self._setup_handlers()

    def _setup_handlers(self):
        @self.server.list_tools()
        async def handle_list_tools() -> List[Tool]:
            return [
                Tool(
                    name="synth_dataset",
                    description="Generate the synthetic multi-site weakly-labelled dataset",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "seed": {"type": "integer", "description": "Dataset seed"},
                            "out": {"type": "string", "description": "Output directory"},
                            "sites": {"type": "string", "description": '"default4" or a JSON site list path'},
                            "n_train": {"type": "integer", "description": "Training samples per site"},
                            "n_test": {"type": "integer", "description": "Test samples per site"},
                            "force": {"type": "boolean", "description": "Overwrite a non-empty directory"},
                        },
                    },
                ),
                Tool(
                    name="train",
                    description="Run one federated or baseline method; returns the run directory",
                    inputSchema={"type": "object", "properties": TRAIN_PROPERTIES},
                ),
                Tool(
                    name="evaluate",
                    description="Evaluate a finished run on the test splits (DSC and HD95 per site)",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "run_dir": {"type": "string", "description": "Run directory"},
                            "dataset": {"type": "string", "description": "Dataset directory (optional)"},
                        },
                        "required": ["run_dir"],
                    },
                ),
                Tool(
                    name="dump_affinity",
                    description="Return the prompt affinity matrix recorded at a round (latest by default)",
                    inputSchema={
                        "type": "object",
                        "properties": {
                            "run_dir": {"type": "string", "description": "Run directory"},
                            "round": {"type": "integer", "description": "Round number (optional)"},
                        },
                        "required": ["run_dir"],
                    },
                ),
                Tool(
                    name="list_runs",
                    description="List run directories under the output root",
                    inputSchema={"type": "object", "properties": {}},
                ),
            ]

        @self.server.list_resources()
        async def handle_list_resources() -> List[Resource]:
            """One JSON resource per evaluated run"""
            root = output_root()
            return [
                Resource(
                    uri=f"{RESOURCE_SCHEME}://runs/{summary.parent.relative_to(root).as_posix()}",
                    name=f"{summary.parent.name} summary",
                    mimeType="application/json",
                )
                for summary in sorted(root.glob("**/summary.json"))
            ]

        @self.server.read_resource()
        async def handle_read_resource(uri: AnyUrl) -> List[ReadResourceContents]:
            summary = self._summary_path(str(uri))
            return [ReadResourceContents(content=summary.read_text(encoding="utf-8"), mime_type="application/json")]

        @self.server.call_tool()
        async def handle_call_tool(name: str, arguments: Optional[Dict[str, Any]]) -> List[TextContent]:
            """Handle tool calls and return results as TextContent"""
            arguments = arguments or {}
            try:
                logger.info(f"Handling tool call: {name}")

                if name == "synth_dataset":
                    result = await self._handle_synth(arguments)
                elif name == "train":
                    result = await self._handle_train(arguments)
                elif name == "evaluate":
                    result = await self._handle_evaluate(arguments)
                elif name == "dump_affinity":
                    result = await self._handle_dump_affinity(arguments)
                elif name == "list_runs":
                    result = await self._handle_list_runs()
                else:
                    logger.warning(f"Unknown tool: {name}")
                    return [TextContent(type="text", text=f"Unknown tool: {name}")]

                return [TextContent(type="text", text=result)]

            except Exception as e:
                logger.error(f"Error executing {name}: {str(e)}", exc_info=True)
                return [TextContent(type="text", text=f"Error executing {name}: {str(e)}")]

    def _locked(self, fn, *args):
        with self.job_lock:
            return fn(*args)

    async def _handle_synth(self, arguments: Dict[str, Any]) -> str:
        root = await asyncio.get_event_loop().run_in_executor(
            None,
            self._locked,
            cmd_synth,
            arguments.get("sites", "default4"),
            int(arguments.get("seed", 0)),
            arguments.get("out"),
            bool(arguments.get("force", False)),
            1,
            arguments.get("n_train"),
            arguments.get("n_test"),
        )
        return f"Dataset written to {root}"

    async def _handle_train(self, arguments: Dict[str, Any]) -> str:
        overrides = {k: v for k, v in arguments.items() if k in config_keys()}
        cfg = load_config(arguments.get("config"), overrides)
        run_dir = await asyncio.get_event_loop().run_in_executor(None, self._locked, cmd_train, cfg, False)
        return safe_json_dumps({"run_dir": str(run_dir), "method": cfg.method, "rounds": cfg.rounds})

    async def _handle_evaluate(self, arguments: Dict[str, Any]) -> str:
        summary = await asyncio.get_event_loop().run_in_executor(
            None, cmd_eval, arguments["run_dir"], arguments.get("dataset")
        )
        return safe_json_dumps(summary)

    async def _handle_dump_affinity(self, arguments: Dict[str, Any]) -> str:
        round_t = arguments.get("round")
        matrix = cmd_dump_affinity(arguments["run_dir"], int(round_t) if round_t is not None else None)
        return "\n".join(",".join(f"{v:.6f}" for v in row) for row in matrix.a)

    async def _handle_list_runs(self) -> str:
        root = output_root()
        if not root.is_dir():
            return f"No runs found under {root}"
        runs = []
        for config_path in sorted(root.glob("**/config.json")):
            run_dir = config_path.parent
            entry: Dict[str, Any] = {"run_dir": str(run_dir)}
            try:
                snapshot = read_json(config_path)
                entry.update({key: snapshot.get(key) for key in ("method", "strategy", "seed")})
            except Exception as e:
                logger.warning(f"Unreadable config snapshot {config_path}: {e}")
            entry["evaluated"] = (run_dir / "summary.json").exists()
            entry["affinity_rounds"] = len(affinity_rounds(Path(run_dir)))
            runs.append(entry)
        if not runs:
            return f"No runs found under {root}"
        return safe_json_dumps(runs)

    def _summary_path(self, uri: str) -> Path:
        prefix = f"{RESOURCE_SCHEME}://runs/"
        if not uri.startswith(prefix):
            raise ConfigError(f"Unknown resource {uri}; expected {prefix}<run>")
        root = output_root().resolve()
        summary = (root / uri[len(prefix) :] / "summary.json").resolve()
        if root not in summary.parents:
            raise ConfigError(f"Resource {uri} points outside the output root")
        if not summary.is_file():
            raise DatasetError(f"No evaluated run behind {uri}")
        return summary

    def build_app(self) -> Starlette:
        """Starlette app with the SSE stream, the message endpoint and a health route"""
        transport = SseServerTransport("/messages/")
        init_options = InitializationOptions(
            server_name=SERVER_NAME,
            server_version=SERVER_VERSION,
            capabilities=self.server.get_capabilities(
                notification_options=NotificationOptions(), experimental_capabilities={}
            ),
        )

        async def handle_sse(request: Request) -> Response:
            async with transport.connect_sse(request.scope, request.receive, request._send) as (reader, writer):
                await self.server.run(reader, writer, init_options)
            return Response()

        async def handle_health(request: Request) -> JSONResponse:
            return JSONResponse(
                {"status": "ok", "server": SERVER_NAME, "version": SERVER_VERSION, "output_root": str(output_root())}
            )

        return Starlette(
            routes=[
                Route("/sse", handle_sse, methods=["GET"]),
                Route("/health", handle_health, methods=["GET"]),
                Mount("/messages/", app=transport.handle_post_message),
            ]
        )

    async def run(self):
        """Serve over SSE; with MCP_PERSIST (default on) the process idles after uvicorn returns"""
        persist = os.getenv("MCP_PERSIST", "1") != "0"
        server = uvicorn.Server(uvicorn.Config(self.build_app(), host=self.host, port=self.port, log_level="info"))
        logger.info(f"Starting {SERVER_NAME} on {self.host}:{self.port} (output root {output_root()})")
        try:
            await server.serve()
        except Exception as e:
            logger.error(f"Server error: {e}", exc_info=True)
        if persist:
            logger.info("Uvicorn returned; idling until the process is stopped")
            try:
                await anyio.sleep_forever()
            except anyio.get_cancelled_exc_class():
                pass
        logger.info("Server shutting down")


async def serve(host: Optional[str] = None, port: Optional[int] = None):
    await FedLPPAMCPServer(host=host, port=port).run()


if __name__ == "__main__":
    from cli import main as cli_main

    sys.exit(cli_main(["serve", *sys.argv[1:]]))
