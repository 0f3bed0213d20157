"""In-process FHIR server stub for client tests: pagination, 404s, auth, loops."""
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse


class MockFhirServer:
    """Serves one or more patients' resources with paginated search bundles."""

    def __init__(self, page_size: int = 2, require_token: str | None = None,
                 loop_type: str | None = None):
        self.patients: dict[str, dict] = {}
        self.resources: dict[str, dict[str, list]] = {}
        self.page_size = page_size
        self.require_token = require_token
        self.loop_type = loop_type  # resource type whose page 2 links back to page 1
        self._server = None
        self._thread = None

    def add_patient(self, patient: dict, clinical: list[dict]):
        pid = patient["id"]
        self.patients[pid] = patient
        by_type: dict[str, list] = {}
        for resource in clinical:
            by_type.setdefault(resource["resourceType"], []).append(resource)
        self.resources[pid] = by_type

    def load_bundle(self, bundle: dict):
        entries = [e["resource"] for e in bundle.get("entry", [])]
        patient = next(r for r in entries if r["resourceType"] == "Patient")
        self.add_patient(patient, [r for r in entries if r["resourceType"] != "Patient"])

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_address[1]}/fhir"

    def start(self):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, doc: dict):
                body = json.dumps(doc).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/fhir+json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if outer.require_token:
                    expect = f"Bearer {outer.require_token}"
                    if self.headers.get("Authorization") != expect:
                        self._send(401, {"resourceType": "OperationOutcome"})
                        return
                parsed = urlparse(self.path)
                parts = [p for p in parsed.path.split("/") if p]
                query = parse_qs(parsed.query)
                if len(parts) == 3 and parts[1] == "Patient":
                    patient = outer.patients.get(parts[2])
                    if patient is None:
                        self._send(404, {"resourceType": "OperationOutcome"})
                    else:
                        self._send(200, patient)
                    return
                if len(parts) == 2 and "patient" in query:
                    rtype = parts[1]
                    pid = query["patient"][0]
                    if pid not in outer.patients:
                        self._send(404, {"resourceType": "OperationOutcome"})
                        return
                    page = int(query.get("page", ["0"])[0])
                    items = outer.resources.get(pid, {}).get(rtype, [])
                    start = page * outer.page_size
                    chunk = items[start:start + outer.page_size]
                    bundle = {
                        "resourceType": "Bundle", "type": "searchset",
                        "total": len(items),
                        "entry": [{"resource": r} for r in chunk],
                    }
                    links = []
                    if outer.loop_type == rtype and page == 1:
                        links.append({"relation": "next",
                                      "url": f"{outer.base_url}/{rtype}?patient={pid}&page=0"})
                    elif start + outer.page_size < len(items):
                        links.append({"relation": "next",
                                      "url": f"{outer.base_url}/{rtype}?patient={pid}"
                                             f"&page={page + 1}"})
                    if links:
                        bundle["link"] = links
                    self._send(200, bundle)
                    return
                self._send(404, {"resourceType": "OperationOutcome"})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._server:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
