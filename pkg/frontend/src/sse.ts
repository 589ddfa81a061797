import type { QueryEvent, QueryMode } from './types.js';

// Parses "event:" / "data:" frames out of a streamed response body and
// forwards each complete frame. Works on any fetch ReadableStream (browser
// and node 20 share the API).

export function parseFrame(frame: string): QueryEvent | null {
  let eventName = 'message';
  const dataLines: string[] = [];
  for (const rawLine of frame.split(/\r?\n/)) {
    if (rawLine.startsWith('event:')) {
      eventName = rawLine.slice('event:'.length).trim();
    } else if (rawLine.startsWith('data:')) {
      dataLines.push(rawLine.slice('data:'.length).trim());
    }
  }
  if (dataLines.length === 0) return null;
  try {
    const payload = JSON.parse(dataLines.join('\n'));
    return { ...payload, event: eventName } as QueryEvent;
  } catch {
    return { event: 'error', message: `unparseable frame: ${dataLines.join(' ')}` };
  }
}

export async function streamQuery(
  apiBase: string,
  question: string,
  mode: QueryMode,
  onEvent: (event: QueryEvent) => void,
  signal?: AbortSignal,
): Promise<void> {
  const response = await fetch(`${apiBase}/api/v1/query`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify({ question, mode }),
    signal,
  });
  if (!response.ok) throw new Error(`HTTP ${response.status}`);
  if (!response.body) throw new Error('no response body');

  const reader = response.body.getReader();
  const decoder = new TextDecoder('utf-8');
  let buffer = '';
  for (;;) {
    const { value, done } = await reader.read();
    if (done) break;
    buffer += decoder.decode(value, { stream: true });
    const frames = buffer.split(/\r?\n\r?\n/);
    buffer = frames.pop() ?? '';
    for (const frame of frames) {
      const event = parseFrame(frame);
      if (event) onEvent(event);
    }
  }
  if (buffer.trim()) {
    const event = parseFrame(buffer);
    if (event) onEvent(event);
  }
}
