import json
import os
import socket
import subprocess
import sys
import time

import pytest
from mcp.client.session import ClientSession
from mcp.client.sse import sse_client

PORT = 8133


def _wait_for_port(proc, port, timeout=15):
    for i in range(timeout):
        if proc.poll() is not None:
            stdout, stderr = proc.communicate()
            print(f"Server process died: stdout={stdout.decode()}, stderr={stderr.decode()}")
            return False
        time.sleep(1.0)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.settimeout(0.5)
        result = sock.connect_ex(("127.0.0.1", port))
        sock.close()
        if result == 0:
            print(f"Server is listening on attempt {i + 1}")
            return True
    return False


@pytest.mark.local
@pytest.mark.asyncio
async def test_sse_list_tools_and_runs(tmp_path):
    env = os.environ.copy()
    env.setdefault("MCP_PERSIST", "1")  # Keep server running during test
    env["FEDLPPA_OUTPUT_ROOT"] = str(tmp_path)

    proc = subprocess.Popen(
        [
            sys.executable,
            os.path.join(os.path.dirname(__file__), "..", "..", "src", "server.py"),
            "--port",
            str(PORT),
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        env=env,
    )

    try:
        assert _wait_for_port(proc, PORT), "Server failed to start within 15 seconds"

        async with sse_client(f"http://127.0.0.1:{PORT}/sse") as streams:
            async with ClientSession(*streams) as session:
                await session.initialize()
                result = await session.list_tools()
                tool_names = [t.name for t in result.tools]
                assert {"synth_dataset", "train", "evaluate", "dump_affinity", "list_runs"} <= set(tool_names)

                runs = await session.call_tool("list_runs", {})
                assert runs.content[0].text == f"No runs found under {tmp_path}"

                (tmp_path / "demo").mkdir()
                (tmp_path / "demo" / "config.json").write_text(json.dumps({"method": "local", "seed": 1}))
                runs = await session.call_tool("list_runs", {})
                assert json.loads(runs.content[0].text)[0]["method"] == "local"
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            print("Server didn't terminate gracefully, killing...")
            proc.kill()
