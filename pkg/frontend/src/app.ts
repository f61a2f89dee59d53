/** DOM glue: renders the view models from model.ts and wires button clicks
 * to the API client. All state lives on the broker; this file only draws. */

import { ApiError, BrokerClient } from "./api.js";
import type { Endpoint, FunctionRecord, TaskRun } from "./api.js";
import {
  describeActionError,
  historyRows,
  pendingRows,
  REFRESH_INTERVAL_MS,
  rowActions,
  runDetailView,
  type Notice,
  type Session,
} from "./model.js";

interface AppState {
  client: BrokerClient;
  session: Session;
  runs: TaskRun[];
  endpoints: Endpoint[];
  functions: FunctionRecord[];
  selectedRunId: string | null;
  notice: Notice | null;
}

let state: AppState | null = null;
let timer: number | null = null;

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node;
}

function brokerUrl(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("broker") ?? "http://127.0.0.1:8765";
}

async function refresh(): Promise<void> {
  if (state === null) return;
  try {
    const [runs, endpoints, functions] = await Promise.all([
      state.client.listRuns(),
      state.client.listEndpoints(),
      state.client.listFunctions(),
    ]);
    state.runs = runs;
    state.endpoints = endpoints;
    state.functions = functions;
  } catch (error) {
    if (error instanceof ApiError) state.notice = describeActionError(error);
    else state.notice = { kind: "error", text: "Broker unreachable." };
  }
  render();
}

async function act(action: "approve" | "reject", runId: string): Promise<void> {
  if (state === null) return;
  try {
    if (action === "approve") await state.client.approve(runId);
    else await state.client.reject(runId);
    state.notice = { kind: "info", text: `${action} recorded for ${runId}` };
  } catch (error) {
    if (error instanceof ApiError) state.notice = describeActionError(error);
    else throw error;
  }
  await refresh();
}

function text(tag: string, content: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  node.textContent = content;
  if (className !== undefined) node.className = className;
  return node;
}

function renderPending(container: HTMLElement): void {
  if (state === null) return;
  container.replaceChildren();
  const rows = pendingRows(
    state.runs,
    state.endpoints,
    state.functions,
    state.session,
    Date.now(),
  );
  if (rows.length === 0) {
    container.append(text("p", "No runs waiting for review.", "empty"));
    return;
  }
  for (const row of rows) {
    const card = document.createElement("div");
    card.className = "pending-card";
    card.append(
      text("div", `${row.endpointName} · requested by ${row.requester} · ${row.ageSeconds}s ago`, "meta"),
    );
    if (row.repoUrl !== null) {
      card.append(text("div", `repo ${row.repoUrl} @ ${row.repoRef ?? "HEAD"}`, "meta"));
    }
    const cmd = text("pre", row.commandText, "command");
    card.append(cmd);
    const actions = document.createElement("div");
    actions.className = "actions";
    for (const action of rowActions(row)) {
      const button = document.createElement("button");
      button.textContent = action;
      button.dataset["action"] = action;
      button.addEventListener("click", () => void act(action, row.runId));
      actions.append(button);
    }
    card.append(actions);
    card.addEventListener("click", () => selectRun(row.runId));
    container.append(card);
  }
}

function renderHistory(container: HTMLElement): void {
  if (state === null) return;
  container.replaceChildren();
  const table = document.createElement("table");
  const head = document.createElement("tr");
  for (const title of ["run", "state", "verdict", "exit", "requester"]) {
    head.append(text("th", title));
  }
  table.append(head);
  for (const row of historyRows(state.runs)) {
    const tr = document.createElement("tr");
    tr.className = `verdict-${row.verdict}`;
    tr.append(
      text("td", row.runId.slice(0, 8)),
      text("td", row.state),
      text("td", row.verdict === "passed" ? "pass" : row.verdict === "failed" ? "FAIL" : "…"),
      text("td", row.exitCode === null ? "" : String(row.exitCode)),
      text("td", row.requester),
    );
    tr.addEventListener("click", () => selectRun(row.runId));
    table.append(tr);
  }
  container.append(table);
}

async function selectRun(runId: string): Promise<void> {
  if (state === null) return;
  state.selectedRunId = runId;
  await renderDetail();
}

async function renderDetail(): Promise<void> {
  if (state === null) return;
  const container = el("detail");
  container.replaceChildren();
  const selected = state.selectedRunId;
  if (selected === null) return;
  const run = state.runs.find((r) => r.run_id === selected);
  if (run === undefined) {
    container.append(text("p", "Run not found.", "empty"));
    return;
  }
  let bundles: Awaited<ReturnType<BrokerClient["runArtifacts"]>> = [];
  try {
    bundles = await state.client.runArtifacts(run.run_id);
  } catch {
    // artifacts are optional detail; the run view renders without them
  }
  const view = runDetailView(run, bundles);
  container.append(
    text("h3", `run ${view.runId}`),
    text("div", view.failureBadge ? `${view.state} ✗` : view.state,
      view.failureBadge ? "badge badge-fail" : "badge"),
  );
  const timeline = document.createElement("ul");
  for (const t of view.timeline) {
    timeline.append(
      text("li", `${new Date(t.at).toISOString()} ${t.from_state} -> ${t.to_state} (${t.actor})`),
    );
  }
  container.append(timeline);
  for (const [label, panel] of [["stdout", view.stdout], ["stderr", view.stderr]] as const) {
    if (panel === null) continue;
    container.append(text("h4", panel.truncated ? `${label} (truncated)` : label));
    container.append(text("pre", panel.populated ? panel.text : "(empty)", "stream"));
  }
  if (view.provenance !== null) {
    container.append(text("h4", "provenance"));
    const tools = Object.entries(view.provenance.toolVersions)
      .map(([name, version]) => `${name} ${version}`)
      .join(", ");
    container.append(
      text("p", `${view.provenance.hostname} · ${view.provenance.os} · ${tools}`),
    );
  }
  if (view.artifacts.length > 0) {
    container.append(text("h4", "artifacts"));
    for (const bundle of view.artifacts) {
      const line = bundle.purged
        ? `${bundle.artifactId} (purged; metadata retained)`
        : bundle.artifactId;
      container.append(text("p", line, bundle.purged ? "purged" : undefined));
      const list = document.createElement("ul");
      for (const file of bundle.files) {
        list.append(text("li", `${file.path} · ${file.byteSize} bytes · ${file.digest.slice(0, 12)}`));
      }
      container.append(list);
    }
  }
}

function render(): void {
  if (state === null) return;
  el("who").textContent = state.session.subject;
  const noticeNode = el("notice");
  if (state.notice === null) {
    noticeNode.textContent = "";
    noticeNode.className = "";
  } else {
    noticeNode.textContent = state.notice.text;
    noticeNode.className = `notice-${state.notice.kind}`;
  }
  renderPending(el("pending"));
  renderHistory(el("history"));
  void renderDetail();
}

async function login(event: Event): Promise<void> {
  event.preventDefault();
  const clientId = (el("client-id") as HTMLInputElement).value;
  const secret = (el("client-secret") as HTMLInputElement).value;
  const client = new BrokerClient(brokerUrl());
  try {
    const grant = await client.login(clientId, secret);
    state = {
      client,
      session: { subject: grant.subject },
      runs: [],
      endpoints: [],
      functions: [],
      selectedRunId: null,
      notice: null,
    };
  } catch (error) {
    el("login-error").textContent =
      error instanceof ApiError ? error.message : "Broker unreachable.";
    return;
  }
  el("login").hidden = true;
  el("main").hidden = false;
  await refresh();
  if (timer !== null) window.clearInterval(timer);
  timer = window.setInterval(() => void refresh(), REFRESH_INTERVAL_MS);
}

export function boot(): void {
  el("login-form").addEventListener("submit", (event) => void login(event));
}

boot();
