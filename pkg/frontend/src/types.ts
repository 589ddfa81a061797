// Event payloads and API shapes, mirroring the engine's documented HTTP/SSE
// interface. The console holds no private protocol beyond these.

export type StageName = 'intent' | 'logic_form' | 'dual_level' | 'verify' | 'generate';
export type StageStatus = 'ok' | 'failed' | 'skipped';
export type FinalPath = 'refused' | 'logic_form' | 'dual_level' | 'dual_level_unverified';
export type QueryMode = 'auto' | 'dual' | 'logic';

export type StageEvent = { event: 'stage'; name: StageName; status: StageStatus; detail?: string };
export type TokenEvent = { event: 'token'; text: string };
export type VerdictEvent = { event: 'verdict'; mode: 'argument' | 'result'; verdict: 'supported' | 'unsupported' };
export type DoneEvent = { event: 'done'; final_path: FinalPath; answer: string };
export type ErrorEvent = { event: 'error'; message: string };

export type QueryEvent = StageEvent | TokenEvent | VerdictEvent | DoneEvent | ErrorEvent;

export interface ChunkPayload {
  chunk_id: string;
  text: string;
}

export interface NodeResult {
  id: string;
  display_name: string;
  entity_type: string;
  description: string;
  keywords: string[];
  weight: number;
  score: number;
  chunks: ChunkPayload[];
}

export interface EdgeResult {
  src: string;
  dst: string;
  description: string;
  keywords: string[];
  weight: number;
  score: number;
  chunks: ChunkPayload[];
}

export interface SearchResponse {
  nodes: NodeResult[];
  edges: EdgeResult[];
}

export interface GraphStats {
  nodes: number;
  edges: number;
  chunks: number;
}
