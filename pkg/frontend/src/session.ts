import type { FinalPath, QueryEvent, StageName, StageStatus } from './types.js';

// Client-local chat session state. Events apply in arrival order; a turn is
// terminal once `done` or `error` lands, and later events are ignored.

export interface StageBadge {
  name: StageName;
  status: StageStatus;
  detail: string;
}

export interface Verdict {
  mode: 'argument' | 'result';
  verdict: 'supported' | 'unsupported';
}

export interface Turn {
  question: string;
  stages: StageBadge[];
  verdicts: Verdict[];
  streamText: string;
  answer: string;
  finalPath: FinalPath | null;
  status: 'streaming' | 'done' | 'failed';
  error: string;
}

export interface ChatSession {
  sessionId: string;
  turns: Turn[];
}

export function newSession(sessionId: string): ChatSession {
  return { sessionId, turns: [] };
}

export function newTurn(question: string): Turn {
  return {
    question,
    stages: [],
    verdicts: [],
    streamText: '',
    answer: '',
    finalPath: null,
    status: 'streaming',
    error: '',
  };
}

export function applyEvent(turn: Turn, event: QueryEvent): Turn {
  if (turn.status !== 'streaming') return turn;
  switch (event.event) {
    case 'stage': {
      const stages = [...turn.stages, { name: event.name, status: event.status, detail: event.detail ?? '' }];
      return { ...turn, stages };
    }
    case 'token':
      return { ...turn, streamText: turn.streamText + event.text };
    case 'verdict':
      return { ...turn, verdicts: [...turn.verdicts, { mode: event.mode, verdict: event.verdict }] };
    case 'done':
      // the rendered answer is the done payload, not the token concatenation
      return { ...turn, answer: event.answer, finalPath: event.final_path, status: 'done' };
    case 'error':
      return { ...turn, error: event.message, status: 'failed' };
    default:
      return turn;
  }
}

// Last reported status per stage, in pipeline order, for the badge row.
const STAGE_ORDER: StageName[] = ['intent', 'logic_form', 'dual_level', 'verify', 'generate'];

export function badgeRow(turn: Turn): StageBadge[] {
  const byName = new Map<StageName, StageBadge>();
  for (const badge of turn.stages) {
    byName.set(badge.name, badge);
  }
  return STAGE_ORDER.filter((name) => byName.has(name)).map((name) => byName.get(name)!);
}
