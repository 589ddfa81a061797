"""HTTP service: ingestion jobs, streamed query answering, graph inspection.

Query answers stream as server-sent events (`stage`, `token`, `verdict`,
`done`, `error`). Ingestion runs as background jobs polled by id.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import uuid
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from .errors import EmptyIndex, KgragError
from .pipeline import Orchestrator

logger = logging.getLogger(__name__)

_STREAM_DONE = object()


@dataclass
class Job:
    job_id: str
    state: str = "queued"  # queued | running | done | failed
    report: dict | None = None
    error: str = ""

    def to_json(self) -> dict:
        return {"job_id": self.job_id, "state": self.state, "report": self.report, "error": self.error}


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def create(self) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:12])
        with self._lock:
            self._jobs[job.job_id] = job
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)


class IngestBody(BaseModel):
    paths: list[str]


class QueryBody(BaseModel):
    question: str
    mode: str = "auto"


def _sse(event: str, payload: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(payload, ensure_ascii=False)}\n\n"


def create_app(orchestrator: Orchestrator) -> FastAPI:
    app = FastAPI(title="kgrag", version="0.1.0")
    jobs = JobRegistry()
    ingest_lock = threading.Lock()  # one writer at a time

    @app.get("/api/v1/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/api/v1/ingest")
    def ingest(body: IngestBody):
        job = jobs.create()

        def work():
            job.state = "running"
            try:
                with ingest_lock:
                    report = orchestrator.ingest(body.paths)
                job.report = report.to_json()
                job.state = "done"
            except Exception as exc:  # job captures any failure for the poller
                logger.exception("ingest job %s failed", job.job_id)
                job.error = str(exc)
                job.state = "failed"

        threading.Thread(target=work, daemon=True).start()
        return {"job_id": job.job_id}

    @app.get("/api/v1/jobs/{job_id}")
    def job_state(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail="unknown job")
        return job.to_json()

    @app.post("/api/v1/query")
    def query(body: QueryBody):
        events: queue.Queue = queue.Queue()

        def work():
            try:
                orchestrator.answer(body.question, mode=body.mode, sink=events.put)
            except KgragError:
                pass  # the pipeline already emitted an error event
            except Exception as exc:
                logger.exception("query failed")
                events.put({"event": "error", "message": str(exc)})
            finally:
                events.put(_STREAM_DONE)

        threading.Thread(target=work, daemon=True).start()

        def stream():
            while True:
                event = events.get()
                if event is _STREAM_DONE:
                    break
                name = event.pop("event")
                yield _sse(name, event)

        return StreamingResponse(stream(), media_type="text/event-stream")

    @app.get("/api/v1/graph/stats")
    def stats():
        return orchestrator.load_store().stats()

    @app.get("/api/v1/graph/search")
    def search(q: str, k: int = 10):
        store = orchestrator.load_store().snapshot()
        if not q.strip():
            return {"nodes": [], "edges": []}
        vec = orchestrator.gateway.embed([q])[0]

        def chunk_payload(refs: set[str]) -> list[dict]:
            return [
                {"chunk_id": cid, "text": store.chunks[cid].text}
                for cid in sorted(refs)
                if cid in store.chunks
            ]

        nodes = []
        try:
            for key, sim in store.knn(vec, k, "node"):
                node = store.nodes[key[2:]]
                nodes.append(
                    {
                        "id": node.node_id,
                        "display_name": node.display_name,
                        "entity_type": node.entity_type,
                        "description": node.description,
                        "keywords": node.keywords,
                        "weight": node.weight,
                        "score": sim,
                        "chunks": chunk_payload(node.chunk_refs),
                    }
                )
        except EmptyIndex:
            pass
        edges = []
        try:
            for key, sim in store.knn(vec, k, "edge"):
                src, _, dst = key[2:].partition("|")
                edge = store.edges[(src, dst)]
                edges.append(
                    {
                        "src": edge.src,
                        "dst": edge.dst,
                        "description": edge.description,
                        "keywords": edge.keywords,
                        "weight": edge.weight,
                        "score": sim,
                        "chunks": chunk_payload(edge.chunk_refs),
                    }
                )
        except EmptyIndex:
            pass
        return {"nodes": nodes, "edges": edges}

    return app
