// Typed client for the hub's JSON API. Authentication rides on the
// everhub_token cookie the login flow sets, so every call is same-origin.

export interface SessionSummary {
  id: string;
  repo: string;
  state: string;
  route_path: string;
  created_at: number;
  last_activity_at: number;
}

export interface SessionFailure {
  stage: string;
  detail: string;
}

export interface SessionDetail extends SessionSummary {
  user_login: string;
  requested_ref: string;
  resolved_commit: string;
  image_tag: string;
  endpoint: string;
  failure: SessionFailure | null;
}

export interface LogLine {
  index: number;
  text: string;
  ts: number;
}

export interface LogBatch {
  lines: LogLine[];
  next_index: number;
  terminal: boolean;
}

export interface LaunchAccepted {
  id: string;
  state: string;
  route_path: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    detail: string,
  ) {
    super(detail || code);
  }
}

export interface Api {
  listSessions(all?: boolean): Promise<SessionSummary[]>;
  createSession(repoUrl: string, ref?: string): Promise<LaunchAccepted>;
  getSession(id: string): Promise<SessionDetail>;
  deleteSession(id: string): Promise<void>;
  fetchLogs(id: string, from: number, wait?: number): Promise<LogBatch>;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class HttpApi implements Api {
  constructor(private fetcher: FetchLike = (input, init) => fetch(input, init)) {}

  async listSessions(all = false): Promise<SessionSummary[]> {
    return this.request("GET", all ? "/api/sessions?all=1" : "/api/sessions");
  }

  async createSession(repoUrl: string, ref?: string): Promise<LaunchAccepted> {
    const body: Record<string, string> = { repo_url: repoUrl };
    if (ref) body.ref = ref;
    return this.request("POST", "/api/sessions", body);
  }

  async getSession(id: string): Promise<SessionDetail> {
    return this.request("GET", `/api/sessions/${encodeURIComponent(id)}`);
  }

  async deleteSession(id: string): Promise<void> {
    await this.request("DELETE", `/api/sessions/${encodeURIComponent(id)}`);
  }

  async fetchLogs(id: string, from: number, wait = 5): Promise<LogBatch> {
    const params = new URLSearchParams({ from: String(from), wait: String(wait) });
    return this.request("GET", `/api/sessions/${encodeURIComponent(id)}/logs?${params}`);
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { Accept: "application/json" } };
    if (body !== undefined) {
      init.headers = { ...init.headers, "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetcher(path, init);
    const payload = await response.json().catch(() => ({}));
    if (!response.ok) {
      throw new ApiError(response.status, payload.error ?? "error", payload.detail ?? "");
    }
    return payload as T;
  }
}
