"""Append-only JSONL audit trail of CLI runs."""
import hashlib
import json
import time
from pathlib import Path

RECORD_FILE = "runs.jsonl"


def params_digest(params):
    """Stable 16-hex digest of a ConstructionParams (or any pydantic model / dict)."""
    payload = params.model_dump(mode="json") if hasattr(params, "model_dump") else params
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def record_run(out_dir, command, params, checks, outputs=None, metadata=None):
    """Append one run record under out_dir.

    Args:
        out_dir: Output directory of the run.
        command: CLI sub-command.
        params: ConstructionParams used for the run.
        checks: dict of check name → {value, tolerance, pass}.
        outputs: Optional list of files the run wrote.
        metadata: Optional dict of extra fields.

    Returns:
        The record dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = params_digest(params)
    record = {
        "id": hashlib.sha256(f"{command}{digest}{time.time()}".encode()).hexdigest()[:16],
        "command": command,
        "params_digest": digest,
        "checks": checks,
        "passed": all(c.get("pass", False) for c in checks.values()),
        "outputs": [str(p) for p in outputs or []],
        "metadata": metadata or {},
        "timestamp": time.time(),
        "iso_time": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out_dir / RECORD_FILE, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")
    return record


def get_runs(out_dir, limit=100):
    """Run records under out_dir, most recent first."""
    log_file = Path(out_dir) / RECORD_FILE
    if not log_file.exists():
        return []

    records = []
    with open(log_file, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError:
                    continue
    records.sort(key=lambda r: r.get("timestamp", 0), reverse=True)
    return records[:limit]


def format_run_log(records):
    """Format run records as a markdown audit log."""
    lines = ["# Run Log\n"]
    for r in records:
        lines.append(f"## [{r.get('id', '?')}] {r.get('command', '?')}")
        lines.append(f"**Params:** {r.get('params_digest', '?')}")
        lines.append(f"**Time:** {r.get('iso_time', '?')}")
        lines.append(f"**Passed:** {r.get('passed', '?')}")
        failed = [name for name, c in r.get("checks", {}).items() if not c.get("pass", False)]
        if failed:
            lines.append(f"**Failed checks:** {', '.join(failed)}")
        for path in r.get("outputs", []):
            lines.append(f"- {path}")
        lines.append("")
    return "\n".join(lines)
