#include <doctest.h>

#include <chrono>
#include <cmath>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <httplib.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "fedilc/datasets.hpp"
#include "fedilc/wire.hpp"

using namespace fedilc;
using nlohmann::json;

namespace {

const ModelSpec kSpec{{5, 4, 1}};

RoundConfig cfg(AlgoMode mode) {
    RoundConfig c;
    c.mode = mode;
    c.lambda = 1.0;
    c.rounds = 3;
    c.batch_size = 8;
    c.geo_chunk = 4;
    c.seed = 1;
    c.adam.lr = 0.01;
    return c;
}

json update_body(std::int64_t run, std::int64_t round, std::size_t id, std::size_t dim, std::size_t head) {
    UpdateMessage m;
    m.run = run;
    m.round = round;
    m.update.client_id = id;
    m.update.grad.assign(dim, 0.5);
    m.update.var_diag.values.assign(head, 0.1);
    m.update.n = 4;
    return to_json(m);
}

}  // namespace

TEST_CASE("update messages round trip exactly") {
    UpdateMessage m;
    m.run = 3;
    m.round = 7;
    m.update.client_id = 2;
    m.update.grad = {0.1, 1.0 / 3.0, -2.5e-300, 1e300};
    m.update.var_diag.values = {0.0, 0.7};
    m.update.var_diag.sample_count = 5;
    m.update.n = 5;
    const UpdateMessage back = update_from_json(json::parse(to_json(m).dump()));
    CHECK(back.run == 3);
    CHECK(back.round == 7);
    CHECK(back.update == m.update);
}

TEST_CASE("malformed update messages are 400") {
    const json good = update_body(1, 0, 0, 3, 2);
    auto expect_400 = [](const json& j) {
        try {
            update_from_json(j);
            FAIL("expected WireError");
        } catch (const WireError& e) {
            CHECK(e.status() == 400);
        }
    };
    for (const char* key : {"run", "round", "client_id", "grad", "var_diag", "n"}) {
        json j = good;
        j.erase(key);
        expect_400(j);
    }
    json j = good;
    j["grad"][0] = "x";
    expect_400(j);
    j = good;
    j["n"] = 0;
    expect_400(j);
    j = good;
    j["client_id"] = -1;
    expect_400(j);
    j = good;
    j["var_diag"][0] = -0.5;
    expect_400(j);
    expect_400(json::array());
}

TEST_CASE("round and setup messages round trip") {
    RoundMessage r;
    r.status = RunStatus::running;
    r.run = 2;
    r.seed = 99;
    r.round = 4;
    r.mode = AlgoMode::fishr_intra_geo;
    r.lambda = 15.0;
    r.w = {0.25, -1.0 / 7.0};
    r.v_bar_prev = {1e-9};
    const RoundMessage back = round_from_json(json::parse(to_json(r).dump()));
    CHECK(back.status == r.status);
    CHECK(back.seed == 99);
    CHECK(back.mode == r.mode);
    CHECK(back.w == r.w);
    CHECK(back.v_bar_prev == r.v_bar_prev);

    const ClientSetup s{1, ModelSpec{{3, 7, 4}, Activation::relu, Head::softmax_ce}, 32, 8};
    const ClientSetup s2 = setup_from_json(json::parse(to_json(s).dump()));
    CHECK(s2.client_id == 1);
    CHECK(s2.spec == s.spec);
    CHECK(s2.batch_size == 32);
}

TEST_CASE("server status codes") {
    WireServer server(kSpec, 2, 8, 4);
    const int port = server.start("127.0.0.1", 0);
    httplib::Client http("127.0.0.1", port);
    const std::size_t dim = ParamVector(kSpec).size();

    auto reg = http.Post("/register", R"({"client_id": 5})", "application/json");
    REQUIRE(reg);
    CHECK(reg->status == 400);
    reg = http.Post("/register", R"({"client_id": 1})", "application/json");
    CHECK(reg->status == 200);
    CHECK(setup_from_json(json::parse(reg->body)).client_id == 1);
    CHECK(http.Post("/register", R"({"client_id": 1})", "application/json")->status == 409);
    CHECK(http.Post("/register", "{not json", "application/json")->status == 400);
    reg = http.Post("/register", "", "application/json");
    CHECK(setup_from_json(json::parse(reg->body)).client_id == 0);
    CHECK(http.Post("/register", "", "application/json")->status == 409);

    // Nothing is running yet.
    CHECK(http.Post("/update", update_body(0, 0, 0, dim, kSpec.head_size()).dump(), "application/json")->status == 409);

    const RoundConfig c = cfg(AlgoMode::fed_curv);
    UpdateSource source = server.begin_run(c);
    ServerState state = init_server(kSpec, c);
    std::vector<ClientUpdate> got;
    std::thread collector([&] { got = source(state); });

    RoundMessage r;
    for (int i = 0; i < 500 && r.status != RunStatus::running; ++i) {
        r = round_from_json(json::parse(http.Get("/round")->body));
        if (r.status != RunStatus::running) std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    REQUIRE(r.status == RunStatus::running);
    CHECK(r.w.size() == dim);

    auto post = [&](const json& j) { return http.Post("/update", j.dump(), "application/json")->status; };
    CHECK(post(update_body(r.run - 1, r.round, 0, dim, kSpec.head_size())) == 409);
    CHECK(post(update_body(r.run, r.round + 1, 0, dim, kSpec.head_size())) == 409);
    CHECK(post(update_body(r.run, r.round, 0, dim - 1, kSpec.head_size())) == 400);
    CHECK(http.Post("/update", "{", "application/json")->status == 400);
    CHECK(post(update_body(r.run, r.round, 0, dim, kSpec.head_size())) == 200);
    CHECK(post(update_body(r.run, r.round, 0, dim, kSpec.head_size())) == 409);
    CHECK(post(update_body(r.run, r.round, 1, dim, kSpec.head_size())) == 200);
    collector.join();
    CHECK(got.size() == 2);
    CHECK(got[0].client_id == 0);

    server.finish();
    server.stop();
}

TEST_CASE("threaded wire clients reproduce the in-process run") {
    const auto fed = make_synth_spurious(40, 4, std::vector<double>{0.2, 0.6, 0.4}, 0.9, 3);
    for (AlgoMode mode : {AlgoMode::fed_sgd, AlgoMode::fishr_inter_geo, AlgoMode::fishr_intra_geo}) {
        const RoundConfig c = cfg(mode);
        const RoundLog local = run_experiment(fed, c, kSpec);

        WireServer server(kSpec, 3, c.batch_size, c.geo_chunk);
        const int port = server.start("127.0.0.1", 0);
        std::vector<std::thread> clients;
        for (std::size_t k = 0; k < 3; ++k) {
            clients.emplace_back([&, k] {
                ClientOptions opt;
                opt.client_id = k;
                run_client("127.0.0.1", port, fed.silos[k].train, opt);
            });
        }
        const RoundLog remote = run_experiment(fed, c, kSpec, server.begin_run(c));
        server.finish();
        CHECK(server.wait_clients_done(10.0));
        for (auto& t : clients) t.join();
        server.stop();
        CHECK(remote.final_params == local.final_params);
        CHECK(remote.rounds == local.rounds);
    }
}

TEST_CASE("client gives up after repeated connection failures") {
    // Grab a free port, then close it so nothing listens there.
    int port = 0;
    {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
        socklen_t len = sizeof addr;
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
        port = ntohs(addr.sin_port);
        ::close(fd);
    }
    const auto fed = make_synth_spurious(10, 4, std::vector<double>{0.2}, 0.9, 3);
    ClientOptions opt;
    opt.max_attempts = 5;
    opt.backoff_ms = 1;
    CHECK_THROWS_WITH_AS(run_client("127.0.0.1", port, fed.silos[0].train, opt), doctest::Contains("after 5"),
                         std::runtime_error);
}
