/** Pure view models. Everything the dashboard decides (who may act, what a
 * row says, how lists are ordered) lives here as plain functions so it can
 * be tested without a browser; the DOM layer only renders these. */

import type {
  ApiError,
  ArtifactBundle,
  Endpoint,
  FunctionRecord,
  TaskRun,
  Transition,
} from "./api.js";

/** Poll cadence of every view, in milliseconds. */
export const REFRESH_INTERVAL_MS = 2000;

export interface Session {
  subject: string;
}

/** The broker re-checks on approve/reject regardless; this only controls
 * whether action buttons are rendered at all. */
export function canReview(session: Session, endpoint: Endpoint): boolean {
  return endpoint.protected && endpoint.reviewer === session.subject;
}

function submittedAt(run: TaskRun): number {
  const first = run.transitions[0];
  return first ? first.at : 0;
}

function lastChangeAt(run: TaskRun): number {
  const last = run.transitions[run.transitions.length - 1];
  return last ? last.at : 0;
}

/** The text a reviewer is deciding on: the exact shell command, or the full
 * payload of the registered function the task would execute. */
export function commandText(
  run: TaskRun,
  functions: ReadonlyMap<string, FunctionRecord>,
): string {
  if (run.spec.shell_cmd !== null) return run.spec.shell_cmd;
  const fn = run.spec.function_id ? functions.get(run.spec.function_id) : undefined;
  if (fn === undefined) return `function ${run.spec.function_id} (payload unavailable)`;
  return fn.payload;
}

export interface PendingRow {
  runId: string;
  endpointId: string;
  endpointName: string;
  requester: string;
  commandText: string;
  repoUrl: string | null;
  repoRef: string | null;
  ageSeconds: number;
  canAct: boolean;
}

/** Review queue: pending runs oldest-first, each row carrying everything the
 * reviewer inspects before deciding. */
export function pendingRows(
  runs: readonly TaskRun[],
  endpoints: readonly Endpoint[],
  functions: readonly FunctionRecord[],
  session: Session,
  nowMs: number,
): PendingRow[] {
  const byEndpoint = new Map(endpoints.map((e) => [e.endpoint_id, e]));
  const byFunction = new Map(functions.map((f) => [f.function_id, f]));
  return runs
    .filter((run) => run.state === "pending_approval")
    .sort((a, b) => submittedAt(a) - submittedAt(b))
    .map((run) => {
      const endpoint = byEndpoint.get(run.spec.endpoint_id);
      return {
        runId: run.run_id,
        endpointId: run.spec.endpoint_id,
        endpointName: endpoint?.display_name ?? run.spec.endpoint_id,
        requester: run.spec.requested_by,
        commandText: commandText(run, byFunction),
        repoUrl: run.spec.repo?.url ?? null,
        repoRef: run.spec.repo?.ref ?? null,
        ageSeconds: Math.max(0, Math.round((nowMs - submittedAt(run)) / 1000)),
        canAct: endpoint !== undefined && canReview(session, endpoint),
      };
    });
}

/** Buttons to render for a row; empty for anyone but the endpoint's reviewer. */
export function rowActions(row: PendingRow): ("approve" | "reject")[] {
  return row.canAct ? ["approve", "reject"] : [];
}

export type Verdict = "passed" | "failed" | "in_progress";

export interface HistoryRow {
  runId: string;
  state: string;
  verdict: Verdict;
  exitCode: number | null;
  requester: string;
  changedAt: number;
}

/** Chronological record for an endpoint, newest first: the pass/fail
 * sequence a reviewer scans to judge reproducibility without re-running. */
export function historyRows(runs: readonly TaskRun[]): HistoryRow[] {
  return [...runs]
    .sort((a, b) => lastChangeAt(b) - lastChangeAt(a))
    .map((run) => {
      let verdict: Verdict = "in_progress";
      if (run.state === "completed") verdict = "passed";
      else if (["failed", "rejected", "expired"].includes(run.state)) verdict = "failed";
      return {
        runId: run.run_id,
        state: run.state,
        verdict,
        exitCode: run.result?.exit_code ?? null,
        requester: run.spec.requested_by,
        changedAt: lastChangeAt(run),
      };
    });
}

export interface StreamPanel {
  text: string;
  truncated: boolean;
  populated: boolean;
}

export interface ArtifactRow {
  artifactId: string;
  purged: boolean;
  files: { path: string; byteSize: number; digest: string }[];
}

export interface RunDetailView {
  runId: string;
  state: string;
  failureBadge: boolean;
  timeline: Transition[];
  stdout: StreamPanel | null;
  stderr: StreamPanel | null;
  provenance: { hostname: string; os: string; toolVersions: Record<string, string> } | null;
  artifacts: ArtifactRow[];
}

export function runDetailView(
  run: TaskRun,
  bundles: readonly ArtifactBundle[],
): RunDetailView {
  const result = run.result;
  return {
    runId: run.run_id,
    state: run.state,
    failureBadge:
      run.state === "failed" || (result !== null && result.exit_code !== 0),
    timeline: run.transitions,
    stdout:
      result === null
        ? null
        : {
            text: result.stdout,
            truncated: result.stdout_truncated,
            populated: result.stdout.length > 0,
          },
    stderr:
      result === null
        ? null
        : {
            text: result.stderr,
            truncated: result.stderr_truncated,
            populated: result.stderr.length > 0,
          },
    provenance:
      result?.provenance == null
        ? null
        : {
            hostname: result.provenance.hostname,
            os: result.provenance.os_description,
            toolVersions: result.provenance.tool_versions,
          },
    artifacts: bundles.map((bundle) => ({
      artifactId: bundle.artifact_id,
      purged: bundle.purged,
      files: bundle.files.map((f) => ({
        path: f.relative_path,
        byteSize: f.byte_size,
        digest: f.digest,
      })),
    })),
  };
}

export interface Notice {
  kind: "info" | "error";
  text: string;
}

/** Approve/reject must stay idempotent from the UI's point of view: a
 * second click races the first and the broker answers wrong_state, which is
 * an outcome to display, not a failure. */
export function describeActionError(error: ApiError): Notice {
  if (error.code === "wrong_state") {
    return { kind: "info", text: "Run was already decided." };
  }
  if (error.code === "not_reviewer") {
    return { kind: "error", text: "You are not the reviewer for this endpoint." };
  }
  if (error.code === "invalid_token") {
    return { kind: "error", text: "Session expired; sign in again." };
  }
  return { kind: "error", text: error.message };
}
