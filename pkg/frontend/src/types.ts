export interface HeuristicCriterion {
  name: string;
  value: number;
  threshold: number;
  passed: boolean;
  margin: number;
}

export interface HeuristicReport {
  accept: boolean;
  criteria: HeuristicCriterion[];
}

export interface QueueItem {
  id: string;
  confidence: number;
  state: string;
  revision: number;
  heuristic: HeuristicReport | null;
  thumbnails: string[];
}

export interface ViewPayload {
  view: number;
  width: number;
  height: number;
  mask_url: string | null;
  contours: number[][][];
  fitted_keypoints: number[][] | null;
  predicted_keypoints: number[][] | null;
  iou: number | null;
}

export interface SampleBundle {
  id: string;
  revision: number;
  state: string;
  fit_missing: boolean;
  confidence: number | null;
  sparse_keypoint_ids: number[];
  views: ViewPayload[];
  heuristic: HeuristicReport | null;
}

export interface SessionInfo {
  revision: number;
  iteration: number;
  accepted: number;
  pool: number;
  queue_length: number;
  budget: number;
  streams: Record<string, string[]>[];
  reports: IterationReport[];
}

export interface IterationReport {
  iteration: number;
  num_heuristic: number;
  num_manual: number;
  num_annotated: number;
  num_rejected: number;
  accepted_total: number;
  [key: string]: unknown;
}
