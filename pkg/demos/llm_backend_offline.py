"""Drive the chat-completion client against an in-process fake endpoint.

The fake server fails twice with 503, then answers with one well-formed
proposal and one that names a location outside the candidate pool.  The
client retries, the parser keeps the good proposal, and the transcript
records the attempt count.  No network access is needed.

    python demos/llm_backend_offline.py
"""

import json
import tempfile
from pathlib import Path

import httpx

from dcats.agent import LLMBackend, Transcript, parse_proposals_report

REPLY = """Proposal 1
Explanation: Two upstream sensors on the same freeway plus the closest pattern match.
Neighbors: [3, 5, 9]

Proposal 2
Explanation: A distant location with similar volume.
Neighbors: [777]
"""
calls = []


def fake_endpoint(request):
    calls.append(json.loads(request.content))
    if len(calls) < 3:
        return httpx.Response(503)
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": REPLY}}]})


backend = LLMBackend("https://llm.example/v1/chat/completions", "any-model", api_key="demo",
                     transport=httpx.MockTransport(fake_endpoint), backoff=0.05)
with tempfile.TemporaryDirectory() as tmp:
    log = Path(tmp) / "transcript.jsonl"
    text = backend.complete("Propose neighbors for location 1.", Transcript(log))
    entry = json.loads(log.read_text())

print(f"{len(calls)} HTTP attempts; request body keys: {sorted(calls[-1])}")
print(f"transcript attempt_count = {entry['attempt_count']}")
accepted, rejected = parse_proposals_report(text, valid_ids=[3, 5, 9, 12], n_expected=5, target_id=1)
for p in accepted:
    print(f"accepted proposal {p.index}: {list(p.neighbor_ids)}")
for r in rejected:
    print(f"rejected block {r.block}: {r.reason} ({r.detail})")
