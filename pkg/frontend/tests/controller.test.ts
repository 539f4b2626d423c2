import { describe, expect, it } from "vitest";

import { ServiceClient } from "../src/client.js";
import { SessionController } from "../src/controller.js";
import type { FetchLike } from "../src/client.js";
import { FakeService, tinyWorld } from "./fakeService.js";
import type { FakeWorld } from "./fakeService.js";

/** Four attributes; splits chosen so candidate counts strictly shrink. */
function scriptedWorld(): FakeWorld {
  const items = new Map<number, Set<number>>([
    [0, new Set([0, 1])],
    [1, new Set([0, 1, 2])],
    [2, new Set([0, 2])],
    [3, new Set([0, 3])],
    [4, new Set([0, 1, 3])],
    [5, new Set([0, 2, 3])],
    [6, new Set([1])],
    [7, new Set([2])],
  ]);
  return { items, attributeCount: 4, slateSize: 2, maxTurns: 15 };
}

/** One attribute shared by every item: nothing to ask, slates all the way. */
function slateOnlyWorld(): FakeWorld {
  const items = new Map<number, Set<number>>();
  for (let v = 0; v < 30; v++) items.set(v, new Set([0]));
  return { items, attributeCount: 1, slateSize: 2, maxTurns: 15 };
}

function controllerWith(world: FakeWorld) {
  const fake = new FakeService(world);
  const client = new ServiceClient("", fake.fetch);
  return { fake, controller: new SessionController(client) };
}

function assertNonIncreasing(series: readonly number[]): void {
  for (let i = 1; i < series.length; i++) {
    expect(series[i]).toBeLessThanOrEqual(series[i - 1]!);
  }
}

describe("scripted conversation", () => {
  it("runs to acceptance and reports the turn count", async () => {
    const { controller } = controllerWith(scriptedWorld());
    const target = 0;
    const targetAttrs = scriptedWorld().items.get(target)!;

    await controller.start(0, 7);
    for (let guard = 0; guard < 40; guard++) {
      const view = controller.view;
      if (view.phase === "question") {
        await controller.answer(targetAttrs.has(view.highlighted!));
      } else if (view.phase === "slate") {
        expect(view.slate).toContain(target);
        await controller.respondToSlate({ item: target });
      } else {
        break;
      }
    }

    const view = controller.view;
    expect(view.phase).toBe("done");
    expect(view.status).toBe("succeeded");
    expect(view.terminationTurn).toBe(4);
    expect(view.counterSeries).toEqual([6, 3, 2, 2]);
    assertNonIncreasing(view.counterSeries);
    expect(view.entries.map((e) => e.kind)).toEqual([
      "opening",
      "question",
      "answer",
      "question",
      "answer",
      "slate",
      "verdict",
    ]);
  });

  it("grinds to the turn budget when every slate is rejected", async () => {
    const { controller } = controllerWith(slateOnlyWorld());
    await controller.start(0, 3);
    for (let guard = 0; guard < 40; guard++) {
      if (controller.view.phase !== "slate") break;
      await controller.respondToSlate({ accepted: false });
    }
    const view = controller.view;
    expect(view.phase).toBe("done");
    expect(view.status).toBe("exhausted");
    expect(view.terminationTurn).toBe(15);
    // Opening plus one entry per rejected slate, two candidates gone each.
    expect(view.counterSeries).toEqual([
      30, 28, 26, 24, 22, 20, 18, 16, 14, 12, 10, 8, 6, 4, 2,
    ]);
    assertNonIncreasing(view.counterSeries);
  });
});

describe("feedback type safety", () => {
  it("cannot send a slate verdict while a question is outstanding", async () => {
    const { fake, controller } = controllerWith(scriptedWorld());
    await controller.start(0, 1);
    expect(controller.view.phase).toBe("question");
    const posts = fake.feedbackPosts;
    await expect(
      controller.respondToSlate({ accepted: false }),
    ).rejects.toThrow(/no outstanding recommendation/);
    expect(fake.feedbackPosts).toBe(posts);
    expect(controller.view.phase).toBe("question");
  });

  it("cannot answer while a slate is outstanding", async () => {
    const { fake, controller } = controllerWith(slateOnlyWorld());
    await controller.start(0, 1);
    expect(controller.view.phase).toBe("slate");
    const posts = fake.feedbackPosts;
    await expect(controller.answer(true)).rejects.toThrow(
      /no outstanding question/,
    );
    expect(fake.feedbackPosts).toBe(posts);
    expect(controller.view.phase).toBe("slate");
  });
});

describe("failure handling", () => {
  it("surfaces a transport error and recovers on retry", async () => {
    const fake = new FakeService(scriptedWorld());
    let failNext = false;
    const flaky: FetchLike = async (input, init) => {
      if (failNext && init?.method === "POST") {
        failNext = false;
        return new Response(
          JSON.stringify({ code: "boom", message: "synthetic outage" }),
          { status: 503, headers: { "content-type": "application/json" } },
        );
      }
      return fake.fetch(input, init);
    };
    const controller = new SessionController(new ServiceClient("", flaky));

    await controller.start(0, 5);
    const before = controller.view;
    expect(before.phase).toBe("question");

    failNext = true;
    await controller.answer(true);
    const failed = controller.view;
    expect(failed.error).toMatch(/boom: synthetic outage/);
    expect(failed.phase).toBe("question");
    expect(failed.highlighted).toBe(before.highlighted);

    await controller.answer(true);
    const after = controller.view;
    expect(after.error).toBeNull();
    expect(after.turn).toBe(before.turn + 1);
  });

  it("reports a service error body through ServiceError fields", async () => {
    const fake = new FakeService(tinyWorld());
    const client = new ServiceClient("", fake.fetch);
    await expect(client.createSession(99)).rejects.toMatchObject({
      name: "ServiceError",
      status: 400,
      code: "invalid_attribute",
    });
  });
});

describe("session resume", () => {
  it("rebuilds mid-session state from the transcript", async () => {
    const fake = new FakeService(scriptedWorld());
    const client = new ServiceClient("", fake.fetch);
    const first = new SessionController(client);
    await first.start(0, 9);
    await first.answer(true);
    const left = first.view;
    expect(left.phase).toBe("question");

    const second = new SessionController(client);
    const sessions = await client.health();
    expect(sessions.sessions).toBe(1);
    await second.resume("fake-1");
    const resumed = second.view;

    expect(resumed.phase).toBe(left.phase);
    expect(resumed.turn).toBe(left.turn);
    expect(resumed.candidateCount).toBe(left.candidateCount);
    expect(resumed.counterSeries).toEqual(left.counterSeries);
    expect(resumed.entries).toEqual(left.entries);
    expect(resumed.highlighted).toBe(left.highlighted);
  });
});
