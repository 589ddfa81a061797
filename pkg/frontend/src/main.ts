import { graphStats, searchGraph } from './api.js';
import { debounce } from './debounce.js';
import { renderSearchResults, renderTurn } from './render.js';
import { applyEvent, newSession, newTurn, type ChatSession, type Turn } from './session.js';
import { streamQuery } from './sse.js';
import type { QueryMode } from './types.js';

// Browser bootstrap. All view logic lives in render.ts/session.ts so the
// test suite exercises the same code without a DOM.

const API_BASE = '';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function renderSession(session: ChatSession, container: HTMLElement): void {
  container.innerHTML = session.turns.map(renderTurn).join('');
  container.scrollTop = container.scrollHeight;
}

export function bootConsole(): void {
  const session = newSession(crypto.randomUUID());
  const history = el<HTMLDivElement>('chat-history');
  const input = el<HTMLInputElement>('chat-input');
  const modeSelect = el<HTMLSelectElement>('mode-select');
  const sendButton = el<HTMLButtonElement>('send-button');

  let inFlight = false;

  async function submit(): Promise<void> {
    const question = input.value.trim();
    if (!question || inFlight) return;
    inFlight = true;
    sendButton.disabled = true;
    input.value = '';

    let turn: Turn = newTurn(question);
    session.turns.push(turn);
    const index = session.turns.length - 1;
    renderSession(session, history);

    const mode = modeSelect.value as QueryMode;
    try {
      await streamQuery(API_BASE, question, mode, (event) => {
        turn = applyEvent(turn, event);
        session.turns[index] = turn;
        renderSession(session, history);
      });
      if (turn.status === 'streaming') {
        turn = { ...turn, status: 'failed', error: 'stream ended without done event' };
        session.turns[index] = turn;
      }
    } catch (error) {
      turn = { ...turn, status: 'failed', error: String(error) };
      session.turns[index] = turn;
    } finally {
      inFlight = false;
      sendButton.disabled = false;
      renderSession(session, history);
    }
  }

  sendButton.addEventListener('click', () => void submit());
  input.addEventListener('keydown', (event) => {
    if (event.key === 'Enter') void submit();
  });

  // --- graph explorer ---
  const searchInput = el<HTMLInputElement>('search-input');
  const resultsPane = el<HTMLDivElement>('search-results');

  const runSearch = debounce(async (query: string) => {
    if (!query.trim()) {
      resultsPane.innerHTML = '<div class="empty-state">Type to search the graph.</div>';
      return;
    }
    try {
      const results = await searchGraph(API_BASE, query, 10);
      resultsPane.innerHTML = renderSearchResults(results);
    } catch (error) {
      resultsPane.innerHTML = `<div class="error-banner">${String(error)}</div>`;
    }
  }, 250);

  searchInput.addEventListener('input', () => runSearch(searchInput.value));

  void graphStats(API_BASE)
    .then((stats) => {
      el<HTMLSpanElement>('stats-line').textContent =
        `${stats.nodes} nodes · ${stats.edges} edges · ${stats.chunks} chunks`;
    })
    .catch(() => {
      el<HTMLSpanElement>('stats-line').textContent = 'service unreachable';
    });
}

if (typeof document !== 'undefined' && document.getElementById('chat-history')) {
  bootConsole();
}
