import type { Turn } from './session.js';
import { badgeRow } from './session.js';
import type { EdgeResult, NodeResult, SearchResponse } from './types.js';

// Pure view functions: state in, HTML string out. The browser bootstrap
// assigns the output to innerHTML; tests assert on it directly.

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

export function renderStageBadges(turn: Turn): string {
  const badges = badgeRow(turn)
    .map(
      (badge) =>
        `<span class="badge badge-${badge.status}" data-stage="${badge.name}" ` +
        `title="${escapeHtml(badge.detail)}">${badge.name}: ${badge.status}</span>`,
    )
    .join('');
  return `<div class="stage-badges">${badges}</div>`;
}

export function renderVerdicts(turn: Turn): string {
  if (turn.verdicts.length === 0) return '';
  const chips = turn.verdicts
    .map((v) => `<span class="verdict verdict-${v.verdict}">${v.mode}: ${v.verdict}</span>`)
    .join('');
  return `<div class="verdicts">${chips}</div>`;
}

export function renderTurn(turn: Turn): string {
  const pieces = [
    `<div class="question">${escapeHtml(turn.question)}</div>`,
    renderStageBadges(turn),
    renderVerdicts(turn),
  ];
  if (turn.status === 'failed') {
    pieces.push(`<div class="error-banner">${escapeHtml(turn.error)}</div>`);
  } else if (turn.status === 'done') {
    pieces.push(`<div class="answer" data-final-path="${turn.finalPath}">${escapeHtml(turn.answer)}</div>`);
    if (turn.finalPath === 'dual_level_unverified') {
      pieces.push('<div class="low-confidence-flag">unverified answer</div>');
    }
  } else {
    pieces.push(`<div class="answer streaming">${escapeHtml(turn.streamText)}</div>`);
  }
  return `<section class="turn turn-${turn.status}">${pieces.join('')}</section>`;
}

function renderChunks(chunks: { chunk_id: string; text: string }[]): string {
  return chunks
    .map(
      (chunk) =>
        `<details class="chunk" data-chunk-id="${escapeHtml(chunk.chunk_id)}">` +
        `<summary>${escapeHtml(chunk.chunk_id)}</summary>` +
        `<div class="chunk-text">${escapeHtml(chunk.text)}</div></details>`,
    )
    .join('');
}

export function renderNodeCard(node: NodeResult): string {
  return (
    `<article class="node-card" data-node-id="${escapeHtml(node.id)}">` +
    `<h3>${escapeHtml(node.display_name)} <small>(${escapeHtml(node.entity_type)})</small></h3>` +
    `<p>${escapeHtml(node.description)}</p>` +
    `<div class="meta">weight ${node.weight} · score ${node.score.toFixed(3)} · ` +
    `keywords: ${escapeHtml(node.keywords.join(', '))}</div>` +
    renderChunks(node.chunks) +
    '</article>'
  );
}

export function renderEdgeCard(edge: EdgeResult): string {
  return (
    `<article class="edge-card" data-edge-id="${escapeHtml(edge.src)}|${escapeHtml(edge.dst)}">` +
    `<h3>${escapeHtml(edge.src)} &rarr; ${escapeHtml(edge.dst)}</h3>` +
    `<p>${escapeHtml(edge.description)}</p>` +
    `<div class="meta">weight ${edge.weight} · score ${edge.score.toFixed(3)}</div>` +
    renderChunks(edge.chunks) +
    '</article>'
  );
}

export function renderSearchResults(results: SearchResponse): string {
  if (results.nodes.length === 0 && results.edges.length === 0) {
    return '<div class="empty-state">No matching nodes or edges.</div>';
  }
  return (
    `<div class="results"><div class="node-results">${results.nodes.map(renderNodeCard).join('')}</div>` +
    `<div class="edge-results">${results.edges.map(renderEdgeCard).join('')}</div></div>`
  );
}
