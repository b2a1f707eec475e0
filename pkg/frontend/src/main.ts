import { ApiClient, ConflictError, ServiceUnreachableError } from "./api.js";
import { render, type Handlers } from "./render.js";
import { initialState, reduce, type Action, type AppState } from "./state.js";

const api = new ApiClient("");
let state: AppState = initialState;
const root = document.getElementById("app") as HTMLElement;

function dispatch(action: Action): void {
  state = reduce(state, action);
  render(root, state, handlers);
}

async function refreshQueue(): Promise<void> {
  try {
    const queue = await api.getQueue();
    dispatch({ kind: "queue", revision: queue.revision, items: queue.items });
  } catch (err) {
    if (err instanceof ServiceUnreachableError) {
      dispatch({ kind: "banner", message: "annotation service unreachable" });
    } else {
      throw err;
    }
  }
}

const handlers: Handlers = {
  async onSelectSample(id) {
    const bundle = await api.getSample(id);
    dispatch({ kind: "bundle", bundle });
  },
  async onDecide(decision) {
    const current = state.current;
    if (!current) return;
    try {
      const revision = await api.withRevisionRetry(
        (rev) => api.postDecision(current.id, decision, rev),
        state.revision,
      );
      dispatch({ kind: "decisionSent", sampleId: current.id, revision });
    } catch (err) {
      if (err instanceof ConflictError) {
        dispatch({ kind: "banner", message: `decision rejected: ${err.message}` });
        await refreshQueue();
      } else {
        throw err;
      }
    }
  },
  onToggle(layer) {
    dispatch({ kind: "toggleOverlay", layer });
  },
  onArmKeypoint(id) {
    dispatch({ kind: "armKeypoint", keypointId: id });
  },
  async onTileClick(view, u, v) {
    const current = state.current;
    const keypointId = state.annotateKeypoint;
    if (!current || keypointId === null) return;
    try {
      const revision = await api.withRevisionRetry(
        (rev) => api.postKeypoint(current.id, view, keypointId, u, v, rev),
        state.revision,
      );
      dispatch({ kind: "keypointSent", view, keypointId, u, v, revision });
    } catch (err) {
      dispatch({ kind: "banner", message: `keypoint rejected: ${err}` });
    }
  },
  async onIterate() {
    if (state.iterating) return;
    dispatch({ kind: "iterationStarted" });
    try {
      const result = await api.triggerIteration();
      dispatch({ kind: "iterationFinished", report: result.report, revision: result.revision });
      await refreshQueue();
    } catch (err) {
      dispatch({ kind: "iterationFailed", message: `iteration failed: ${err}` });
    }
  },
};

async function boot(): Promise<void> {
  try {
    const session = await api.getSession();
    dispatch({ kind: "session", revision: session.revision });
    await refreshQueue();
  } catch {
    dispatch({ kind: "banner", message: "annotation service unreachable" });
  }
}

void boot();
