/** Typed client for the inference service. Frames travel as base64 PNG. */

export type SourceSpec =
  | { dataset: string; clip?: number; frame?: number }
  | { png: string };

export interface CreateSessionResponse {
  session_id: string;
  frame_png: string;
}

export interface StepResponse {
  frame_png: string;
  indices: number[];
  latency_ms: number;
}

export interface CodebookInfo {
  size: number;
  num_tokens: number;
  usage_counts: number[];
}

export interface SessionHistory {
  session_id: string;
  seed: number;
  frames: string[];
  actions: number[][];
}

export type StepAction = { indices: number[] } | { instruction: string };

/** The service surface the UI depends on; tests substitute a fake. */
export interface ServiceApi {
  createSession(source: SourceSpec, seed?: number): Promise<CreateSessionResponse>;
  step(sessionId: string, action: StepAction, requestId: string): Promise<StepResponse>;
  suggest(sessionId: string, instruction: string): Promise<{ indices: number[] }>;
  codebook(): Promise<CodebookInfo>;
  extract(obsPng: string, goalPng: string): Promise<{ indices: number[] }>;
  history(sessionId: string): Promise<SessionHistory>;
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(`service error ${status}: ${detail}`);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const response = await fetch(url, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class ApiClient implements ServiceApi {
  constructor(readonly baseUrl: string) {}

  createSession(source: SourceSpec, seed = 0): Promise<CreateSessionResponse> {
    return request(`${this.baseUrl}/sessions`, {
      method: "POST",
      body: JSON.stringify({ source, seed }),
    });
  }

  step(sessionId: string, action: StepAction, requestId: string): Promise<StepResponse> {
    return request(`${this.baseUrl}/sessions/${sessionId}/step`, {
      method: "POST",
      body: JSON.stringify({ ...action, request_id: requestId }),
    });
  }

  suggest(sessionId: string, instruction: string): Promise<{ indices: number[] }> {
    return request(`${this.baseUrl}/sessions/${sessionId}/suggest`, {
      method: "POST",
      body: JSON.stringify({ instruction }),
    });
  }

  codebook(): Promise<CodebookInfo> {
    return request(`${this.baseUrl}/codebook`);
  }

  extract(obsPng: string, goalPng: string): Promise<{ indices: number[] }> {
    return request(`${this.baseUrl}/extract`, {
      method: "POST",
      body: JSON.stringify({ obs_png: obsPng, goal_png: goalPng }),
    });
  }

  history(sessionId: string): Promise<SessionHistory> {
    return request(`${this.baseUrl}/sessions/${sessionId}`);
  }
}
