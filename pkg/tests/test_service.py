import numpy as np
import pytest
from fastapi.testclient import TestClient

from convrec.belief import BeliefNetwork, BtnConfig
from convrec.data import ItemCatalog, UserHistory
from convrec.dialogue import (
    PolicyConfig,
    TurnRecord,
    apply_attribute_feedback,
    apply_recommendation_feedback,
    replay_candidate_counts,
)
from convrec.recommender import EmbeddingStore, RecommendationNetwork, RnConfig
from convrec.service import ModelSnapshot, create_app


def make_snapshot(labels=None, slate_size=3):
    catalog = ItemCatalog(
        {v: {v % 5, (v * 3 + 1) % 5} for v in range(12)}, attribute_count=5)
    store = EmbeddingStore(range(3), catalog.item_ids, dim=6, seed=0)
    btn = BeliefNetwork(BtnConfig(attribute_count=5, user_dim=6,
                                  history_length=2, conv_channels=3,
                                  conv_dense=8, hidden=(10, 12), dropout=0.2),
                        seed=0)
    rn = RecommendationNetwork(RnConfig(dim=6, history_length=2,
                                        block1_channels=3, block2_channels=4,
                                        trunk_hidden=10, head_hidden=(8, 6)),
                               seed=0)
    attr_emb = np.random.default_rng(0).normal(size=(5, 6))
    histories = {u: UserHistory(u, (u,), catalog.binary_matrix([u], rows=2))
                 for u in range(3)}
    return ModelSnapshot(catalog, store, btn, rn, attr_emb, histories,
                         config=PolicyConfig(slate_size=slate_size,
                                             mc_passes=2),
                         attribute_labels=labels)


SNAPSHOT = make_snapshot()


@pytest.fixture()
def client():
    return TestClient(create_app(SNAPSHOT))


def drive_to_completion(client, session_id, target):
    """Answer truthfully for the target item until the session terminates."""
    attrs = SNAPSHOT.catalog.attributes_of(target)
    for _ in range(40):
        action = client.get(f"/sessions/{session_id}/next_action")
        if action.status_code == 409:
            break
        body = action.json()
        if body["type"] == "question":
            reply = client.post(f"/sessions/{session_id}/feedback",
                                json={"type": "answer",
                                      "liked": body["attribute"] in attrs})
        else:
            accepted = target in body["items"]
            reply = client.post(f"/sessions/{session_id}/feedback",
                                json={"type": "recommendation",
                                      "accepted": accepted})
        assert reply.status_code == 200
        if reply.json()["status"] != "active":
            return reply.json()
    return client.get(f"/sessions/{session_id}").json()


class TestSessionLifecycle:
    def test_create_returns_created_with_summary(self, client):
        reply = client.post("/sessions", json={"opening_attribute": 1})
        assert reply.status_code == 201
        body = reply.json()
        assert body["status"] == "active"
        assert body["turn"] == 1
        assert body["candidate_count"] == len(SNAPSHOT.catalog.items_with(1))
        assert len(body["beliefs"]) == 5
        assert body["asked"] == [1]

    def test_two_creations_get_distinct_ids(self, client):
        a = client.post("/sessions", json={"opening_attribute": 0}).json()
        b = client.post("/sessions", json={"opening_attribute": 0}).json()
        assert a["session_id"] != b["session_id"]

    def test_invalid_attribute_names_the_id(self, client):
        reply = client.post("/sessions", json={"opening_attribute": 99})
        assert reply.status_code == 400
        body = reply.json()
        assert body["code"] == "invalid_attribute"
        assert "99" in body["message"]

    def test_unknown_user_rejected(self, client):
        reply = client.post("/sessions",
                            json={"opening_attribute": 0, "user_id": 77})
        assert reply.status_code == 404
        assert reply.json()["code"] == "unknown_user"

    def test_cold_start_session_allowed(self, client):
        reply = client.post("/sessions", json={"opening_attribute": 0})
        assert reply.status_code == 201

    def test_unknown_session_is_404(self, client):
        assert client.get("/sessions/nope").status_code == 404
        assert client.get("/sessions/nope/next_action").status_code == 404
        reply = client.post("/sessions/nope/feedback",
                            json={"type": "answer", "liked": True})
        assert reply.status_code == 404

    def test_malformed_body_is_400_with_code(self, client):
        reply = client.post("/sessions", json={"opening_attribute": "soon"})
        assert reply.status_code == 400
        assert reply.json()["code"] == "invalid_request"


class TestNextActionAndFeedback:
    def test_repeated_next_action_is_byte_identical(self, client):
        session = client.post("/sessions",
                              json={"opening_attribute": 0, "seed": 5}).json()
        sid = session["session_id"]
        first = client.get(f"/sessions/{sid}/next_action")
        second = client.get(f"/sessions/{sid}/next_action")
        assert first.content == second.content

    def test_feedback_before_action_rejected(self, client):
        session = client.post("/sessions", json={"opening_attribute": 0}).json()
        reply = client.post(f"/sessions/{session['session_id']}/feedback",
                            json={"type": "answer", "liked": True})
        assert reply.status_code == 400
        assert reply.json()["code"] == "no_outstanding_action"

    def test_mismatched_feedback_type_rejected(self, client):
        session = client.post("/sessions",
                              json={"opening_attribute": 0, "seed": 1}).json()
        sid = session["session_id"]
        action = client.get(f"/sessions/{sid}/next_action").json()
        wrong = ("recommendation" if action["type"] == "question" else "answer")
        payload = ({"type": wrong, "accepted": False} if wrong == "recommendation"
                   else {"type": wrong, "liked": True})
        reply = client.post(f"/sessions/{sid}/feedback", json=payload)
        assert reply.status_code == 400
        body = reply.json()
        assert body["code"] == "feedback_mismatch"
        assert action["type"] in body["message"]

    def test_yes_answer_shrinks_candidates_to_intersection(self, client):
        session = client.post("/sessions",
                              json={"opening_attribute": 0, "seed": 2}).json()
        sid = session["session_id"]
        action = client.get(f"/sessions/{sid}/next_action").json()
        if action["type"] != "question":
            pytest.skip("model chose to recommend immediately")
        catalog = SNAPSHOT.catalog
        before = set(catalog.items_with(0))
        expected = len(before & set(catalog.items_with(action["attribute"])))
        reply = client.post(f"/sessions/{sid}/feedback",
                            json={"type": "answer", "liked": True}).json()
        assert reply["candidate_count"] == expected
        assert reply["turn"] == 2

    def test_accept_terminates_and_blocks_further_actions(self, client):
        session = client.post("/sessions",
                              json={"opening_attribute": 3, "seed": 3}).json()
        sid = session["session_id"]
        final = drive_to_completion(client, sid, target=3)
        if final["status"] != "succeeded":
            pytest.skip("target not reachable under this model seed")
        after = client.get(f"/sessions/{sid}/next_action")
        assert after.status_code == 409
        assert after.json()["code"] == "session_terminated"


class TestRoundTrip:
    def test_truthful_session_reaches_success(self, client):
        # Target 0 carries attributes {0, 1}; answering for it truthfully
        # must end in an accepted slate before the turn budget runs out.
        target = 0
        session = client.post("/sessions",
                              json={"opening_attribute": 0, "seed": 11}).json()
        final = drive_to_completion(client, session["session_id"], target)
        assert final["status"] == "succeeded"
        assert final["termination_turn"] <= 15

    def test_transcript_replays_cleanly(self, client):
        target = 4
        p1 = sorted(SNAPSHOT.catalog.attributes_of(target))[0]
        session = client.post("/sessions",
                              json={"opening_attribute": p1, "seed": 12}).json()
        sid = session["session_id"]
        drive_to_completion(client, sid, target)
        transcript = client.get(f"/sessions/{sid}/transcript").json()
        records = [TurnRecord.from_dict(r) for r in transcript["records"]]
        counts = replay_candidate_counts(SNAPSHOT.catalog, records)
        assert counts == [r.candidates_after for r in records]

    def test_api_trace_matches_direct_execution(self, client):
        target = 7
        attrs = SNAPSHOT.catalog.attributes_of(target)
        p1 = sorted(attrs)[0]
        seed = 21

        session = client.post(
            "/sessions", json={"opening_attribute": p1, "seed": seed}).json()
        sid = session["session_id"]
        api_steps = []
        for _ in range(40):
            action = client.get(f"/sessions/{sid}/next_action")
            if action.status_code == 409:
                break
            body = action.json()
            if body["type"] == "question":
                payload = {"type": "answer", "liked": body["attribute"] in attrs}
            else:
                payload = {"type": "recommendation",
                           "accepted": target in body["items"]}
            summary = client.post(f"/sessions/{sid}/feedback",
                                  json=payload).json()
            api_steps.append((body, summary["turn"],
                              summary["candidate_count"], summary["status"],
                              tuple(summary["feedback"])))
            if summary["status"] != "active":
                break

        from convrec.dialogue import ConversationEngine
        engine = ConversationEngine(
            SNAPSHOT.catalog, SNAPSHOT.store, SNAPSHOT.belief_net,
            SNAPSHOT.rec_net, SNAPSHOT.attribute_embeddings,
            SNAPSHOT.histories, config=SNAPSHOT.config)
        state = engine.open_session(None, p1, seed=seed)
        direct_steps = []
        while state.status == "active":
            action = engine.next_action(state)
            if action.kind == "question":
                body = {"type": "question", "attribute": action.attribute}
                apply_attribute_feedback(state, action.attribute,
                                         action.attribute in attrs,
                                         SNAPSHOT.catalog)
            else:
                body = {"type": "recommendation", "items": list(action.items)}
                apply_recommendation_feedback(state, action.items,
                                              target in action.items,
                                              SNAPSHOT.config.max_turns)
            direct_steps.append((body, state.turn, len(state.candidates),
                                 state.status, tuple(state.feedback)))

        assert api_steps == direct_steps


class TestSessionIsolation:
    def test_interleaved_sessions_do_not_share_state(self, client):
        a = client.post("/sessions",
                        json={"opening_attribute": 0, "seed": 31}).json()
        b = client.post("/sessions",
                        json={"opening_attribute": 3, "seed": 32}).json()
        sid_a, sid_b = a["session_id"], b["session_id"]
        assert a["candidate_count"] == len(SNAPSHOT.catalog.items_with(0))
        assert b["candidate_count"] == len(SNAPSHOT.catalog.items_with(3))

        action_a = client.get(f"/sessions/{sid_a}/next_action").json()
        action_b = client.get(f"/sessions/{sid_b}/next_action").json()

        # Feed only session A; session B's outstanding action and state
        # must be untouched.
        if action_a["type"] == "question":
            client.post(f"/sessions/{sid_a}/feedback",
                        json={"type": "answer", "liked": False})
        else:
            client.post(f"/sessions/{sid_a}/feedback",
                        json={"type": "recommendation", "accepted": False})
        again_b = client.get(f"/sessions/{sid_b}/next_action").json()
        assert again_b == action_b
        summary_b = client.get(f"/sessions/{sid_b}").json()
        assert summary_b["turn"] == 1
        assert summary_b["asked"] == [3]

        summary_a = client.get(f"/sessions/{sid_a}").json()
        assert summary_a["turn"] == 2

    def test_interleaving_schedule_matches_sequential_runs(self, client):
        # The same scripted session produces the same trace whether it runs
        # alone or interleaved with another session.
        def step(sid, liked):
            action = client.get(f"/sessions/{sid}/next_action")
            if action.status_code == 409:
                return ("ended",)
            body = action.json()
            if body["type"] != "question":
                client.post(f"/sessions/{sid}/feedback",
                            json={"type": "recommendation", "accepted": False})
                return ("slate", tuple(body["items"]))
            client.post(f"/sessions/{sid}/feedback",
                        json={"type": "answer", "liked": liked})
            return ("q", body["attribute"], liked)

        answers = [True, False, True]
        solo = client.post("/sessions",
                           json={"opening_attribute": 0, "seed": 41}).json()
        solo_trace = [step(solo["session_id"], liked) for liked in answers]

        x = client.post("/sessions",
                        json={"opening_attribute": 0, "seed": 41}).json()
        y = client.post("/sessions",
                        json={"opening_attribute": 2, "seed": 42}).json()
        trace_x = []
        trace_y = []
        for liked in answers:
            trace_x.append(step(x["session_id"], liked))
            trace_y.append(step(y["session_id"], not liked))
        assert trace_x == solo_trace


class TestExpiry:
    def test_idle_sessions_expire(self):
        now = [0.0]
        app = create_app(SNAPSHOT, ttl=10.0, clock=lambda: now[0])
        client = TestClient(app)
        session = client.post("/sessions", json={"opening_attribute": 0}).json()
        sid = session["session_id"]
        now[0] = 5.0
        assert client.get(f"/sessions/{sid}").status_code == 200
        now[0] = 16.0  # 11 idle seconds since the last touch at t=5
        reply = client.get(f"/sessions/{sid}")
        assert reply.status_code == 404
        assert reply.json()["code"] == "unknown_session"


class TestMetadataEndpoints:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"

    def test_cross_origin_requests_allowed(self, client):
        response = client.get("/health", headers={"Origin": "http://localhost:5173"})
        assert response.headers["access-control-allow-origin"] == "*"

    def test_attribute_listing_counts_items(self, client):
        body = client.get("/attributes").json()
        assert len(body["attributes"]) == 5
        for entry in body["attributes"]:
            members = SNAPSHOT.catalog.items_with(entry["id"])
            assert entry["item_count"] == len(members)

    def test_attribute_labels_served_when_configured(self):
        labels = tuple(f"genre-{p}" for p in range(5))
        app = create_app(make_snapshot(labels=labels))
        client = TestClient(app)
        body = client.get("/attributes").json()
        assert [e["label"] for e in body["attributes"]] == list(labels)

    def test_label_count_validated(self):
        with pytest.raises(ValueError, match="labels"):
            make_snapshot(labels=("just-one",))
