import type { IterationReport, QueueItem, SampleBundle } from "./types.js";

/** Fingertip/wrist annotation palette; ids match the service's sparse set. */
export const SPARSE_KEYPOINT_COLORS: Record<number, string> = {
  0: "#ffffff", // wrist
  4: "#ff5555", // thumb tip
  8: "#ffaa00", // index tip
  12: "#55ff55", // middle tip
  16: "#55aaff", // ring tip
  20: "#ff55ff", // pinky tip
};

export interface AppState {
  revision: number;
  queue: QueueItem[];
  current: SampleBundle | null;
  overlays: { contours: boolean; predicted: boolean; fitted: boolean };
  annotateKeypoint: number | null; // sparse id armed for click placement
  pendingAnnotations: { view: number; keypointId: number; u: number; v: number }[];
  iterating: boolean;
  lastReport: IterationReport | null;
  banner: string | null;
}

export const initialState: AppState = {
  revision: 0,
  queue: [],
  current: null,
  overlays: { contours: true, predicted: true, fitted: true },
  annotateKeypoint: null,
  pendingAnnotations: [],
  iterating: false,
  lastReport: null,
  banner: null,
};

export type Action =
  | { kind: "session"; revision: number }
  | { kind: "queue"; revision: number; items: QueueItem[] }
  | { kind: "bundle"; bundle: SampleBundle }
  | { kind: "closeBundle" }
  | { kind: "decisionSent"; sampleId: string; revision: number }
  | { kind: "keypointSent"; view: number; keypointId: number; u: number; v: number; revision: number }
  | { kind: "toggleOverlay"; layer: keyof AppState["overlays"] }
  | { kind: "armKeypoint"; keypointId: number | null }
  | { kind: "iterationStarted" }
  | { kind: "iterationFinished"; report: IterationReport; revision: number }
  | { kind: "iterationFailed"; message: string }
  | { kind: "banner"; message: string | null };

/** Pure state transition; rendering is a function of the result. */
export function reduce(state: AppState, action: Action): AppState {
  switch (action.kind) {
    case "session":
      return { ...state, revision: action.revision };
    case "queue":
      return { ...state, revision: action.revision, queue: action.items };
    case "bundle":
      return {
        ...state,
        revision: Math.max(state.revision, action.bundle.revision),
        current: action.bundle,
        annotateKeypoint: null,
        pendingAnnotations: [],
      };
    case "closeBundle":
      return { ...state, current: null, annotateKeypoint: null, pendingAnnotations: [] };
    case "decisionSent":
      return {
        ...state,
        revision: action.revision,
        queue: state.queue.filter((item) => item.id !== action.sampleId),
        current: state.current && state.current.id === action.sampleId ? null : state.current,
      };
    case "keypointSent":
      return {
        ...state,
        revision: action.revision,
        pendingAnnotations: [
          ...state.pendingAnnotations,
          { view: action.view, keypointId: action.keypointId, u: action.u, v: action.v },
        ],
      };
    case "toggleOverlay":
      return {
        ...state,
        overlays: { ...state.overlays, [action.layer]: !state.overlays[action.layer] },
      };
    case "armKeypoint":
      return { ...state, annotateKeypoint: action.keypointId };
    case "iterationStarted":
      return { ...state, iterating: true, banner: null };
    case "iterationFinished":
      return {
        ...state,
        iterating: false,
        lastReport: action.report,
        revision: action.revision,
        current: null,
        pendingAnnotations: [],
      };
    case "iterationFailed":
      return { ...state, iterating: false, banner: action.message };
    case "banner":
      return { ...state, banner: action.message };
  }
}
