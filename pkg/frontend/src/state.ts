/**
 * Session canvas state: the client-side point list, decoded overlay mask,
 * and the request pipeline.
 *
 * Points render optimistically and roll back if the segment request fails;
 * while a request is in flight further clicks coalesce into a single queued
 * snapshot (depth 1, latest wins). After every completed round-trip the
 * client point list equals the server session's list.
 */

import { Point, SegmentBackend } from "./api.js";
import { decodeRle } from "./rle.js";

export interface CanvasState {
  sessionId: string;
  task: string;
  mode: string;
  w: number;
  h: number;
  points: Point[];
  mask: Uint8Array | null;
  confidence: number | null;
  opacity: number;
  busy: boolean;
  lastError: string | null;
}

type Listener = (state: CanvasState) => void;

export class SessionStore {
  private points: Point[] = [];
  private confirmedPoints: Point[] = [];
  private mask: Uint8Array | null = null;
  private confidence: number | null = null;
  private opacity = 0.45;
  private lastError: string | null = null;
  private inFlight = false;
  private queued: Point[] | null = null;
  private listeners: Listener[] = [];

  constructor(
    private backend: SegmentBackend,
    public readonly sessionId: string,
    public readonly w: number,
    public readonly h: number,
    public task: string = "RV",
    public mode: string = "global"
  ) {}

  state(): CanvasState {
    return {
      sessionId: this.sessionId,
      task: this.task,
      mode: this.mode,
      w: this.w,
      h: this.h,
      points: [...this.points],
      mask: this.mask,
      confidence: this.confidence,
      opacity: this.opacity,
      busy: this.inFlight,
      lastError: this.lastError,
    };
  }

  subscribe(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    const snapshot = this.state();
    for (const fn of this.listeners) fn(snapshot);
  }

  setOpacity(value: number): void {
    this.opacity = value;
    this.emit();
  }

  setMode(mode: string): void {
    this.mode = mode;
    this.emit();
  }

  /** Append a point optimistically and request a fresh segmentation. */
  async placePoint(x: number, y: number, polarity: 0 | 1): Promise<void> {
    if (x < 0 || y < 0 || x >= this.w || y >= this.h) {
      this.lastError = "point outside the image";
      this.emit();
      return;
    }
    this.points = [...this.points, { x: Math.floor(x), y: Math.floor(y), polarity }];
    this.lastError = null;
    this.emit();
    await this.request([...this.points]);
  }

  /** Ask the server to pop one state off its history. */
  async undoPoint(): Promise<void> {
    if (this.inFlight) return; // undo races are resolved by ignoring while busy
    this.inFlight = true;
    this.emit();
    try {
      const resp = await this.backend.undo();
      if (!resp.noop) {
        this.points = resp.points ?? [];
        this.confirmedPoints = [...this.points];
        this.mask = resp.rle ? decodeRle(resp.rle, this.h, this.w) : null;
        this.confidence = resp.confidence ?? null;
      }
      this.lastError = null;
    } catch (err) {
      this.lastError = String(err);
    } finally {
      this.inFlight = false;
      this.emit();
    }
  }

  get canUndo(): boolean {
    return this.confirmedPoints.length > 0 || this.mask !== null;
  }

  private async request(points: Point[]): Promise<void> {
    if (this.inFlight) {
      this.queued = points; // latest wins
      return;
    }
    this.inFlight = true;
    this.emit();
    try {
      const resp = await this.backend.segment(points, this.mode);
      this.mask = decodeRle(resp.rle, resp.h, resp.w);
      this.confidence = resp.confidence;
      this.confirmedPoints = [...points];
      this.lastError = null;
    } catch (err) {
      // roll back the optimistic points to the last confirmed state
      this.points = [...this.confirmedPoints];
      this.lastError = String(err);
    } finally {
      this.inFlight = false;
      this.emit();
      const next = this.queued;
      this.queued = null;
      if (next) await this.request(next);
    }
  }
}
