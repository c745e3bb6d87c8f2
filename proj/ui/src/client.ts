// Typed client for the graph service. Feature profiles are cached per
// (layer, index) so hovering a node requests it once.

import type {
  AttributeRequest,
  FeatureProfile,
  GraphJson,
  InterventionResult,
  InterventionSpec,
  LanguageFeatures,
  Meta,
  ServiceError,
  SweepRequest,
  SweepResult,
} from "./types";

export type Fetch = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceRequestError extends Error {
  constructor(
    readonly status: number,
    readonly payload: ServiceError,
  ) {
    super(payload.field ? `${payload.field}: ${payload.error}` : payload.error);
  }
}

export class ServiceClient {
  private readonly profiles = new Map<string, Promise<FeatureProfile>>();

  constructor(
    private readonly base: string,
    private readonly fetchFn: Fetch = (url, init) => fetch(url, init),
  ) {}

  meta(): Promise<Meta> {
    return this.get("/api/meta");
  }

  attribute(req: AttributeRequest): Promise<GraphJson> {
    return this.post("/api/attribute", req);
  }

  feature(layer: number, index: number): Promise<FeatureProfile> {
    const key = `${layer}/${index}`;
    let p = this.profiles.get(key);
    if (!p) {
      p = this.get<FeatureProfile>(`/api/feature/${layer}/${index}`);
      this.profiles.set(key, p);
      p.catch(() => this.profiles.delete(key));
    }
    return p;
  }

  intervene(prompt: string, spec: InterventionSpec): Promise<InterventionResult> {
    return this.post("/api/intervene", { prompt, spec });
  }

  sweep(req: SweepRequest): Promise<SweepResult> {
    return this.post("/api/sweep", req);
  }

  languageFeatures(threshold?: number): Promise<LanguageFeatures> {
    const q = threshold === undefined ? "" : `?threshold=${encodeURIComponent(String(threshold))}`;
    return this.get(`/api/language-features${q}`);
  }

  private get<T>(path: string): Promise<T> {
    return this.send<T>(path, { method: "GET" });
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.send<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  private async send<T>(path: string, init: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    const payload = await res.json();
    if (!res.ok) throw new ServiceRequestError(res.status, payload as ServiceError);
    return payload as T;
  }
}
