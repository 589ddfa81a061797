import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { healthy, searchGraph } from '../src/api.js';
import { debounce } from '../src/debounce.js';
import { renderSearchResults, renderTurn } from '../src/render.js';
import { applyEvent, badgeRow, newTurn, type Turn } from '../src/session.js';
import { parseFrame, streamQuery } from '../src/sse.js';
import type { QueryEvent } from '../src/types.js';
import { SEARCH_FIXTURE, startMockServer, type MockServer } from './mockServer.js';

let server: MockServer;

beforeAll(async () => {
  server = await startMockServer();
});

afterAll(async () => {
  await server.close();
});

async function runTurn(question: string): Promise<{ turn: Turn; events: QueryEvent[] }> {
  let turn = newTurn(question);
  const events: QueryEvent[] = [];
  await streamQuery(server.url, question, 'auto', (event) => {
    events.push(event);
    turn = applyEvent(turn, event);
  });
  return { turn, events };
}

describe('SSE parsing', () => {
  it('parses named event frames', () => {
    const event = parseFrame('event: stage\ndata: {"name":"intent","status":"ok"}');
    expect(event).toEqual({ event: 'stage', name: 'intent', status: 'ok' });
  });

  it('ignores frames without data', () => {
    expect(parseFrame('event: ping')).toBeNull();
  });

  it('turns malformed data into an error event', () => {
    const event = parseFrame('event: token\ndata: {broken');
    expect(event?.event).toBe('error');
  });
});

describe('chat view', () => {
  it('renders the happy path with all badges ok', async () => {
    const { turn, events } = await runTurn('happy question');
    expect(turn.status).toBe('done');
    expect(turn.finalPath).toBe('logic_form');

    // the rendered answer equals the done payload
    const doneEvent = events.find((e) => e.event === 'done');
    expect(turn.answer).toBe(doneEvent && 'answer' in doneEvent ? doneEvent.answer : '');

    const badges = badgeRow(turn);
    expect(badges.map((b) => `${b.name}:${b.status}`)).toEqual([
      'intent:ok',
      'logic_form:ok',
      'verify:ok',
      'generate:ok',
    ]);

    const html = renderTurn(turn);
    expect(html).toContain('data-stage="intent"');
    expect(html).toContain('badge-ok');
    expect(html).toContain('Simei 2 is the parent.');
    expect(html).toContain('data-final-path="logic_form"');
  });

  it('renders the fallback path with a failed logic badge', async () => {
    const { turn } = await runTurn('fallback question');
    const badges = Object.fromEntries(badgeRow(turn).map((b) => [b.name, b.status]));
    expect(badges['logic_form']).toBe('failed');
    expect(badges['dual_level']).toBe('ok');
    expect(turn.finalPath).toBe('dual_level');

    const html = renderTurn(turn);
    expect(html).toContain('badge-failed');
    expect(html).toContain('Recovered answer.');
  });

  it('surfaces the double-failure path as unverified', async () => {
    const { turn } = await runTurn('double failure question');
    expect(turn.finalPath).toBe('dual_level_unverified');
    expect(turn.verdicts).toEqual([{ mode: 'argument', verdict: 'unsupported' }]);

    const html = renderTurn(turn);
    expect(html).toContain('verdict-unsupported');
    expect(html).toContain('low-confidence-flag');
    expect(html).toContain('Note: unverified. Best effort answer.');
  });

  it('streamed tokens accumulate in arrival order', async () => {
    const { events } = await runTurn('happy question');
    const tokens = events.filter((e) => e.event === 'token');
    let turn = newTurn('happy question');
    for (const event of events) {
      turn = applyEvent(turn, event);
      if (turn.status === 'streaming' && tokens.length > 0) {
        expect('Simei 2 is the parent.'.startsWith(turn.streamText)).toBe(true);
      }
    }
  });

  it('marks the turn failed on an error event and keeps it terminal', async () => {
    let turn = newTurn('unknown question');
    await streamQuery(server.url, 'unknown question', 'auto', (event) => {
      turn = applyEvent(turn, event);
    });
    expect(turn.status).toBe('failed');
    expect(turn.error).toContain('no script');
    const frozen = applyEvent(turn, { event: 'token', text: 'late' });
    expect(frozen).toEqual(turn);

    const html = renderTurn(turn);
    expect(html).toContain('error-banner');
  });
});

describe('graph explorer', () => {
  it('search results equal the API payload exactly', async () => {
    const results = await searchGraph(server.url, 'Zhefu', 10);
    expect(results).toEqual(SEARCH_FIXTURE);
  });

  it('renders node and edge cards with provenance chunks', async () => {
    const results = await searchGraph(server.url, 'Zhefu', 10);
    const html = renderSearchResults(results);
    expect(html).toContain('data-node-id="zhefu 802"');
    expect(html).toContain('data-edge-id="zhefu 802|simei 2"');
    // clicking a provenance chunk id reveals the chunk text (details/summary)
    expect(html).toContain('data-chunk-id="d0:c1"');
    expect(html).toContain('Zhefu 802 was bred from Simei 2.');
  });

  it('shows an empty state for no results', async () => {
    const results = await searchGraph(server.url, 'nothing here', 10);
    expect(renderSearchResults(results)).toContain('empty-state');
  });

  it('debounce coalesces request bursts', async () => {
    const before = server.searchCalls.length;
    const run = debounce((q: string) => void searchGraph(server.url, q, 5), 30);
    run('Z');
    run('Zh');
    run('Zhefu');
    await new Promise((resolve) => setTimeout(resolve, 120));
    expect(server.searchCalls.length - before).toBe(1);
    expect(server.searchCalls.at(-1)).toBe('Zhefu');
  });

  it('health endpoint reachable', async () => {
    expect(await healthy(server.url)).toBe(true);
    expect(await healthy('http://127.0.0.1:1')).toBe(false);
  });

  it('unreachable server rejects promptly so the caller can mark the turn failed', async () => {
    await expect(
      streamQuery('http://127.0.0.1:1', 'happy question', 'auto', () => {}),
    ).rejects.toThrow();
  });
});

describe('escaping', () => {
  it('question text is html-escaped', () => {
    const turn = newTurn('<script>alert(1)</script>');
    expect(renderTurn(turn)).not.toContain('<script>alert');
  });
});
