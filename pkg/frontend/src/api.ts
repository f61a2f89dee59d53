/** Typed fetch client for the broker HTTP API. The dashboard holds no state
 * of its own; everything shown comes from these endpoints and every mutation
 * goes through them, so the broker's audit log captures all of it. */

export type RunState =
  | "submitted"
  | "pending_approval"
  | "queued"
  | "claimed"
  | "staging"
  | "running"
  | "completed"
  | "failed"
  | "rejected"
  | "expired";

export interface RepoRef {
  url: string;
  ref: string;
}

export interface TaskSpec {
  endpoint_id: string;
  kind: "shell" | "function";
  shell_cmd: string | null;
  function_id: string | null;
  args: string[];
  env: Record<string, string>;
  repo: RepoRef | null;
  timeout_seconds: number;
  requested_by: string;
}

export interface Transition {
  from_state: RunState;
  to_state: RunState;
  at: number;
  actor: string;
}

export interface ProvenanceSnapshot {
  hostname: string;
  os_description: string;
  captured_env: Record<string, string>;
  tool_versions: Record<string, string>;
  captured_at: number;
}

export interface TaskResult {
  exit_code: number;
  stdout: string;
  stdout_truncated: boolean;
  stderr: string;
  stderr_truncated: boolean;
  duration_seconds: number;
  provenance: ProvenanceSnapshot | null;
}

export interface TaskRun {
  run_id: string;
  spec: TaskSpec;
  state: RunState;
  transitions: Transition[];
  result: TaskResult | null;
  claimed_by: string | null;
}

export interface Endpoint {
  endpoint_id: string;
  display_name: string;
  mode: "single_user" | "multi_user";
  protected: boolean;
  reviewer: string | null;
  allow_list: string[];
  status: "online" | "offline";
  last_heartbeat: number;
}

export interface FunctionRecord {
  function_id: string;
  owner: string;
  payload_kind: string;
  payload: string;
  registered_at: number;
}

export interface ArtifactFile {
  relative_path: string;
  byte_size: number;
  digest: string;
}

export interface ArtifactBundle {
  artifact_id: string;
  run_id: string;
  files: ArtifactFile[];
  created_at: number;
  retention_days: number;
  purged: boolean;
}

export interface AuditEvent {
  seq: number;
  timestamp: number;
  actor: string;
  action: string;
  subject: string;
  details: Record<string, unknown>;
}

export interface Login {
  token: string;
  subject: string;
  issued_at: number;
  expires_at: number;
}

export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class BrokerClient {
  private token: string | null = null;

  constructor(readonly baseUrl: string) {}

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<any> {
    const headers: Record<string, string> = {};
    if (this.token !== null) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const response = await fetch(`${this.baseUrl}${path}`, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let code = "http_error";
      let message = `HTTP ${response.status}`;
      try {
        const payload = await response.json();
        if (typeof payload.error_code === "string") code = payload.error_code;
        if (typeof payload.message === "string") message = payload.message;
      } catch {
        // non-JSON error body; keep the generic message
      }
      throw new ApiError(code, message, response.status);
    }
    return response.json();
  }

  async login(clientId: string, clientSecret: string): Promise<Login> {
    const grant = await this.request("POST", "/v1/token", {
      client_id: clientId,
      client_secret: clientSecret,
    });
    this.token = grant.token;
    return grant as Login;
  }

  async listEndpoints(): Promise<Endpoint[]> {
    return (await this.request("GET", "/v1/endpoints")).endpoints;
  }

  async listFunctions(): Promise<FunctionRecord[]> {
    return (await this.request("GET", "/v1/functions")).functions;
  }

  async listRuns(filter?: {
    state?: RunState;
    endpointId?: string;
  }): Promise<TaskRun[]> {
    const params = new URLSearchParams();
    if (filter?.state) params.set("state", filter.state);
    if (filter?.endpointId) params.set("endpoint_id", filter.endpointId);
    const query = params.size > 0 ? `?${params}` : "";
    return (await this.request("GET", `/v1/runs${query}`)).runs;
  }

  async getRun(runId: string): Promise<TaskRun> {
    return this.request("GET", `/v1/runs/${runId}`);
  }

  async approve(runId: string): Promise<TaskRun> {
    return this.request("POST", `/v1/runs/${runId}/approve`);
  }

  async reject(runId: string): Promise<TaskRun> {
    return this.request("POST", `/v1/runs/${runId}/reject`);
  }

  async getResult(runId: string): Promise<TaskResult> {
    return this.request("GET", `/v1/runs/${runId}/result`);
  }

  async runArtifacts(runId: string): Promise<ArtifactBundle[]> {
    return (await this.request("GET", `/v1/runs/${runId}/artifacts`)).artifacts;
  }

  async queryAudit(filter?: {
    subject?: string;
    action?: string;
    seqFrom?: number;
    seqTo?: number;
  }): Promise<AuditEvent[]> {
    const params = new URLSearchParams();
    if (filter?.subject) params.set("subject", filter.subject);
    if (filter?.action) params.set("action", filter.action);
    if (filter?.seqFrom !== undefined) params.set("seq_from", String(filter.seqFrom));
    if (filter?.seqTo !== undefined) params.set("seq_to", String(filter.seqTo));
    const query = params.size > 0 ? `?${params}` : "";
    return (await this.request("GET", `/v1/audit${query}`)).events;
  }
}
