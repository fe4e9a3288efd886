import { describe, expect, it } from "vitest";
import { ServiceClient } from "../src/api";
import { QuerySession } from "../src/session";
import type { QueryResponse } from "../src/types";

function fixedResponse(queryId: string): QueryResponse {
  return {
    query_id: queryId,
    k: 5,
    clamped: false,
    hits: [
      {
        slice_id: "v:0001",
        similarity: 0.9,
        liver_label: true,
        volume_id: "v",
        url: "/slices/v:0001",
      },
    ],
  };
}

function clientReturning(
  responder: (body: { slice_id?: string }) => QueryResponse,
) {
  const bodies: { slice_id?: string; k: number; restrict_to_volume?: string }[] = [];
  const client = new ServiceClient({
    baseUrl: "http://svc",
    fetchFn: async (_url, init) => {
      const body = JSON.parse(init!.body as string);
      bodies.push(body);
      return new Response(JSON.stringify(responder(body)), { status: 200 });
    },
  });
  return { client, bodies };
}

describe("QuerySession", () => {
  it("appends every query to the history and never rewrites it", async () => {
    const { client } = clientReturning((body) => fixedResponse(body.slice_id!));
    const session = new QuerySession(client);
    await session.queryBySlice("a:0001");
    const first = session.history[0];
    await session.queryBySlice("b:0002");
    expect(session.history.length).toBe(2);
    expect(session.history[0]).toBe(first);
    expect(session.history[0].response.query_id).toBe("a:0001");
    expect(session.current?.response.query_id).toBe("b:0002");
  });

  it("serializes k and the volume filter into the request", async () => {
    const { client, bodies } = clientReturning((body) =>
      fixedResponse(body.slice_id!),
    );
    const session = new QuerySession(client);
    session.k = 7;
    session.restrictToVolume = "phantom_002";
    await session.queryBySlice("a:0001");
    expect(bodies[0]).toEqual({
      slice_id: "a:0001",
      k: 7,
      restrict_to_volume: "phantom_002",
    });
  });

  it("rejects a second query while one is in flight", async () => {
    let release: (() => void) | undefined;
    const gate = new Promise<void>((resolve) => {
      release = resolve;
    });
    const client = new ServiceClient({
      baseUrl: "http://svc",
      fetchFn: async () => {
        await gate;
        return new Response(JSON.stringify(fixedResponse("a:0001")), {
          status: 200,
        });
      },
    });
    const session = new QuerySession(client);
    const pending = session.queryBySlice("a:0001");
    expect(session.busy).toBe(true);
    await expect(session.queryBySlice("b:0002")).rejects.toThrow(
      "already in flight",
    );
    release!();
    await pending;
    expect(session.busy).toBe(false);
    expect(session.history.length).toBe(1);
  });

  it("does not record failed queries", async () => {
    const client = new ServiceClient({
      baseUrl: "http://svc",
      fetchFn: async () =>
        new Response(JSON.stringify({ detail: "boom" }), { status: 500 }),
    });
    const session = new QuerySession(client);
    await expect(session.queryBySlice("a:0001")).rejects.toThrow("boom");
    expect(session.history.length).toBe(0);
    expect(session.busy).toBe(false);
  });

  it("replays recorded responses in order", async () => {
    const { client } = clientReturning((body) => fixedResponse(body.slice_id!));
    const session = new QuerySession(client);
    await session.queryBySlice("a:0001");
    await session.queryBySlice("b:0002");
    const replayed = session.replay();
    expect(replayed.map((r) => r.query_id)).toEqual(["a:0001", "b:0002"]);
    expect(replayed[0]).toBe(session.history[0].response);
  });

  it("tracks per-slice overlay visibility", () => {
    const { client } = clientReturning(() => fixedResponse("a:0001"));
    const session = new QuerySession(client);
    expect(session.overlayVisible("a:0001")).toBe(false);
    expect(session.toggleOverlay("a:0001")).toBe(true);
    expect(session.overlayVisible("a:0001")).toBe(true);
    expect(session.overlayVisible("b:0002")).toBe(false);
    expect(session.toggleOverlay("a:0001")).toBe(false);
    expect(session.overlayVisible("a:0001")).toBe(false);
  });
});
