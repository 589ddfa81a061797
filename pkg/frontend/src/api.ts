import type { GraphStats, SearchResponse } from './types.js';

export async function searchGraph(apiBase: string, query: string, k = 10): Promise<SearchResponse> {
  const params = new URLSearchParams({ q: query, k: String(k) });
  const response = await fetch(`${apiBase}/api/v1/graph/search?${params}`);
  if (!response.ok) throw new Error(`search failed: HTTP ${response.status}`);
  return (await response.json()) as SearchResponse;
}

export async function graphStats(apiBase: string): Promise<GraphStats> {
  const response = await fetch(`${apiBase}/api/v1/graph/stats`);
  if (!response.ok) throw new Error(`stats failed: HTTP ${response.status}`);
  return (await response.json()) as GraphStats;
}

export async function healthy(apiBase: string): Promise<boolean> {
  try {
    const response = await fetch(`${apiBase}/api/v1/healthz`);
    return response.ok;
  } catch {
    return false;
  }
}
