import { ServiceClient } from "./client.js";
import { SessionController } from "./controller.js";
import type { ControllerView } from "./controller.js";
import {
  actionPanelHtml,
  beliefBarsHtml,
  chatLogHtml,
  counterHtml,
  defaultLabel,
  escapeHtml,
  terminalHtml,
} from "./render.js";
import type { LabelFor } from "./render.js";

export interface MountOptions {
  labels?: LabelFor;
  attributeIds?: number[];
}

export interface MountedApp {
  controller: SessionController;
  root: HTMLElement;
}

const SKELETON = `
  <header class="bar">
    <span id="counter"></span>
    <span id="turn"></span>
  </header>
  <form id="start-form">
    <label>Opening attribute
      <select id="opening-attribute"></select>
    </label>
    <label>Seed <input id="seed" type="number" value="0"></label>
    <button type="submit">Start</button>
  </form>
  <section id="beliefs" class="beliefs"></section>
  <section id="chat" class="chat"></section>
  <section id="actions" class="actions"></section>
  <section id="terminal" class="terminal-zone"></section>
  <p id="error" class="error"></p>
`;

/** Wire the chat client into a container element. */
export function mountApp(
  root: HTMLElement,
  client: ServiceClient,
  options: MountOptions = {},
): MountedApp {
  const label = options.labels ?? defaultLabel;
  const controller = new SessionController(client);
  root.innerHTML = SKELETON;

  const byId = <T extends HTMLElement>(id: string): T => {
    const node = root.querySelector<T>(`#${id}`);
    if (node === null) throw new Error(`missing element #${id}`);
    return node;
  };
  const select = byId<HTMLSelectElement>("opening-attribute");
  for (const p of options.attributeIds ?? []) {
    const option = root.ownerDocument.createElement("option");
    option.value = String(p);
    option.textContent = label(p);
    select.appendChild(option);
  }

  const render = (view: ControllerView): void => {
    byId("counter").innerHTML = counterHtml(view.candidateCount);
    byId("turn").textContent = view.status === null ? "" : `turn ${view.turn}`;
    byId("beliefs").innerHTML = beliefBarsHtml(view, label);
    byId("chat").innerHTML = chatLogHtml(view.entries, label);
    byId("actions").innerHTML =
      view.phase === "done" ? "" : actionPanelHtml(view, label);
    byId("terminal").innerHTML =
      view.phase === "done" && view.status !== null && view.status !== "active"
        ? terminalHtml(view.status, view.terminationTurn)
        : "";
    byId("error").textContent = view.error ?? "";
  };
  controller.subscribe(render);
  render(controller.view);

  byId<HTMLFormElement>("start-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const attribute = Number(select.value);
    const seed = Number(byId<HTMLInputElement>("seed").value) || 0;
    void controller.start(attribute, seed);
  });

  byId("actions").addEventListener("click", (event) => {
    const target = event.target as HTMLElement | null;
    const action = target?.dataset?.["action"];
    if (action === "yes" || action === "no") {
      void controller.answer(action === "yes");
    } else if (action === "accept") {
      void controller.respondToSlate({ item: Number(target?.dataset?.["item"]) });
    } else if (action === "reject") {
      void controller.respondToSlate({ accepted: false });
    }
  });

  return { controller, root };
}

/** Entry point for the static page: connect, list attributes, mount. */
export async function boot(
  doc: Document,
  serviceUrl: string,
): Promise<MountedApp> {
  const root = doc.getElementById("convrec-app");
  if (root === null) throw new Error("missing #convrec-app container");
  const client = new ServiceClient(serviceUrl);
  try {
    const listing = await client.attributes();
    const names = new Map(listing.attributes.map((a) => [a.id, a.label]));
    return mountApp(root, client, {
      attributeIds: listing.attributes.map((a) => a.id),
      labels: (p) => names.get(p) ?? defaultLabel(p),
    });
  } catch (err) {
    root.innerHTML = `<p class="error">Cannot reach the service at ${escapeHtml(
      serviceUrl,
    )}: ${escapeHtml(String(err))}</p>`;
    throw err;
  }
}
