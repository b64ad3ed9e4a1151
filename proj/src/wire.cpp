#include "fedilc/wire.hpp"

#include <chrono>
#include <cmath>

#include <httplib.h>

namespace fedilc {

using nlohmann::json;

namespace {

std::string_view status_name(RunStatus s) {
    switch (s) {
        case RunStatus::waiting: return "waiting";
        case RunStatus::running: return "running";
        case RunStatus::done: return "done";
    }
    return "?";
}

RunStatus parse_status(std::string_view s) {
    if (s == "waiting") return RunStatus::waiting;
    if (s == "running") return RunStatus::running;
    if (s == "done") return RunStatus::done;
    throw WireError(400, "unknown status '" + std::string(s) + "'");
}

const json& field(const json& j, const char* key) {
    if (!j.is_object()) throw WireError(400, "expected a JSON object");
    const auto it = j.find(key);
    if (it == j.end()) throw WireError(400, std::string("missing field '") + key + "'");
    return *it;
}

std::int64_t int_field(const json& j, const char* key) {
    const json& v = field(j, key);
    if (!v.is_number_integer()) throw WireError(400, std::string("field '") + key + "' must be an integer");
    return v.get<std::int64_t>();
}

std::vector<double> vector_field(const json& j, const char* key) {
    const json& v = field(j, key);
    if (!v.is_array()) throw WireError(400, std::string("field '") + key + "' must be an array");
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& x : v) {
        if (!x.is_number()) throw WireError(400, std::string("field '") + key + "' must hold numbers");
        const double d = x.get<double>();
        if (!std::isfinite(d)) throw WireError(400, std::string("field '") + key + "' holds a non-finite value");
        out.push_back(d);
    }
    return out;
}

std::string error_body(const std::string& message) { return json{{"error", message}}.dump(); }

}  // namespace

json to_json(const RoundMessage& m) {
    json j{{"status", status_name(m.status)}, {"run", m.run},       {"seed", m.seed},
           {"round", m.round},                {"mode", to_string(m.mode)}, {"lambda", m.lambda}};
    if (m.status == RunStatus::running) {
        j["w"] = m.w;
        j["v_bar_prev"] = m.v_bar_prev;
    }
    return j;
}

RoundMessage round_from_json(const json& j) {
    RoundMessage m;
    const json& status = field(j, "status");
    if (!status.is_string()) throw WireError(400, "status must be a string");
    m.status = parse_status(status.get<std::string>());
    m.run = int_field(j, "run");
    m.round = int_field(j, "round");
    m.seed = field(j, "seed").get<std::uint64_t>();
    m.mode = parse_algo_mode(field(j, "mode").get<std::string>());
    m.lambda = field(j, "lambda").get<double>();
    if (m.status == RunStatus::running && j.contains("w")) {
        m.w = vector_field(j, "w");
        m.v_bar_prev = vector_field(j, "v_bar_prev");
    }
    return m;
}

json to_json(const UpdateMessage& m) {
    return json{{"run", m.run},
                {"round", m.round},
                {"client_id", m.update.client_id},
                {"grad", m.update.grad},
                {"var_diag", m.update.var_diag.values},
                {"n", m.update.n}};
}

UpdateMessage update_from_json(const json& j) {
    UpdateMessage m;
    m.run = int_field(j, "run");
    m.round = int_field(j, "round");
    const std::int64_t id = int_field(j, "client_id");
    const std::int64_t n = int_field(j, "n");
    if (id < 0) throw WireError(400, "client_id must be >= 0");
    if (n < 1) throw WireError(400, "n must be >= 1");
    m.update.client_id = static_cast<std::size_t>(id);
    m.update.n = static_cast<std::size_t>(n);
    m.update.grad = vector_field(j, "grad");
    m.update.var_diag.values = vector_field(j, "var_diag");
    m.update.var_diag.sample_count = m.update.n;
    for (double v : m.update.var_diag.values) {
        if (v < 0.0) throw WireError(400, "var_diag must be non-negative");
    }
    return m;
}

json to_json(const ClientSetup& s) {
    return json{{"client_id", s.client_id},
                {"layer_sizes", s.spec.layer_sizes},
                {"head", to_string(s.spec.head)},
                {"batch_size", s.batch_size},
                {"geo_chunk", s.geo_chunk}};
}

ClientSetup setup_from_json(const json& j) {
    ClientSetup s;
    s.client_id = static_cast<std::size_t>(int_field(j, "client_id"));
    s.spec.layer_sizes = field(j, "layer_sizes").get<std::vector<std::size_t>>();
    s.spec.head = parse_head(field(j, "head").get<std::string>());
    s.batch_size = static_cast<std::size_t>(int_field(j, "batch_size"));
    s.geo_chunk = static_cast<std::size_t>(int_field(j, "geo_chunk"));
    s.spec.validate();
    return s;
}

WireServer::WireServer(ModelSpec spec, std::size_t n_clients, std::size_t batch_size, std::size_t geo_chunk)
    : spec_(std::move(spec)),
      n_clients_(n_clients),
      batch_size_(batch_size),
      geo_chunk_(geo_chunk),
      registered_(n_clients, false),
      saw_done_(n_clients, false),
      http_(std::make_unique<httplib::Server>()) {
    if (n_clients == 0) throw std::invalid_argument("WireServer: need at least one client");
    spec_.validate();
    auto reply = [](httplib::Response& res, int status, const std::string& body) {
        res.status = status;
        res.set_content(body, "application/json");
    };
    http_->Post("/register", [this, reply](const httplib::Request& req, httplib::Response& res) {
        int status = 200;
        std::string body;
        handle_register(req.body, status, body);
        reply(res, status, body);
    });
    http_->Get("/round", [this, reply](const httplib::Request& req, httplib::Response& res) {
        int status = 200;
        std::string body;
        // Clients pass the round they already hold to avoid re-downloading w.
        if (req.has_param("run") && req.has_param("round")) {
            std::lock_guard lock(mu_);
            if (current_.status == RunStatus::running && req.get_param_value("run") == std::to_string(current_.run) &&
                req.get_param_value("round") == std::to_string(current_.round)) {
                reply(res, 200, json{{"status", "unchanged"}}.dump());
                return;
            }
        }
        std::optional<std::size_t> client;
        if (req.has_param("client_id")) {
            try {
                client = std::stoul(req.get_param_value("client_id"));
            } catch (const std::exception&) {
                reply(res, 400, error_body("client_id must be an integer"));
                return;
            }
        }
        handle_round(client, status, body);
        reply(res, status, body);
    });
    http_->Post("/update", [this, reply](const httplib::Request& req, httplib::Response& res) {
        int status = 200;
        std::string body;
        handle_update(req.body, status, body);
        reply(res, status, body);
    });
}

WireServer::~WireServer() { stop(); }

int WireServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = http_->bind_to_any_port(host);
    } else if (!http_->bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw std::runtime_error("WireServer: cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
    return bound;
}

void WireServer::stop() {
    if (http_) http_->stop();
    if (thread_.joinable()) thread_.join();
}

void WireServer::handle_register(const std::string& body, int& status, std::string& out) {
    std::optional<std::size_t> requested;
    try {
        if (!body.empty()) {
            const json j = json::parse(body);
            if (!j.is_object()) throw WireError(400, "expected a JSON object");
            if (j.contains("client_id")) {
                const std::int64_t id = int_field(j, "client_id");
                if (id < 0) throw WireError(400, "client_id must be >= 0");
                requested = static_cast<std::size_t>(id);
            }
        }
    } catch (const json::exception& e) {
        status = 400;
        out = error_body(std::string("malformed JSON: ") + e.what());
        return;
    } catch (const WireError& e) {
        status = e.status();
        out = error_body(e.what());
        return;
    }

    std::lock_guard lock(mu_);
    std::size_t id = 0;
    if (requested) {
        id = *requested;
        if (id >= n_clients_) {
            status = 400;
            out = error_body("client_id out of range");
            return;
        }
        if (registered_[id]) {
            status = 409;
            out = error_body("client_id already registered");
            return;
        }
    } else {
        while (id < n_clients_ && registered_[id]) ++id;
        if (id == n_clients_) {
            status = 409;
            out = error_body("all client slots are taken");
            return;
        }
    }
    registered_[id] = true;
    out = to_json(ClientSetup{id, spec_, batch_size_, geo_chunk_}).dump();
}

void WireServer::handle_round(std::optional<std::size_t> client, int& status, std::string& out) {
    std::lock_guard lock(mu_);
    if (current_.status == RunStatus::done && client && *client < n_clients_) {
        saw_done_[*client] = true;
        cv_.notify_all();
    }
    status = 200;
    out = to_json(current_).dump();
}

void WireServer::handle_update(const std::string& body, int& status, std::string& out) {
    UpdateMessage m;
    try {
        m = update_from_json(json::parse(body));
    } catch (const json::exception& e) {
        status = 400;
        out = error_body(std::string("malformed JSON: ") + e.what());
        return;
    } catch (const WireError& e) {
        status = e.status();
        out = error_body(e.what());
        return;
    }

    std::lock_guard lock(mu_);
    if (current_.status != RunStatus::running || m.run != current_.run || m.round != current_.round) {
        status = 409;
        out = error_body("stale update: server is at run " + std::to_string(current_.run) + " round " +
                         std::to_string(current_.round));
        return;
    }
    if (m.update.client_id >= n_clients_ || !registered_[m.update.client_id]) {
        status = 400;
        out = error_body("unknown client_id");
        return;
    }
    if (m.update.grad.size() != current_.w.size() || m.update.var_diag.values.size() != current_.v_bar_prev.size()) {
        status = 400;
        out = error_body("gradient or variance length does not match the model");
        return;
    }
    if (pending_.contains(m.update.client_id)) {
        status = 409;
        out = error_body("update already received for this round");
        return;
    }
    pending_.emplace(m.update.client_id, std::move(m.update));
    cv_.notify_all();
    status = 200;
    out = json{{"ack", true}}.dump();
}

UpdateSource WireServer::begin_run(const RoundConfig& config) {
    std::int64_t run = 0;
    {
        std::lock_guard lock(mu_);
        config_ = config;
        run = ++current_.run;
        current_.status = RunStatus::waiting;
        current_.seed = config.seed;
        current_.mode = config.mode;
        current_.lambda = config.lambda;
        pending_.clear();
    }
    return [this, run](const ServerState& state) { return collect(state, run); };
}

std::vector<ClientUpdate> WireServer::collect(const ServerState& state, std::int64_t run) {
    std::unique_lock lock(mu_);
    if (current_.run != run) throw std::logic_error("WireServer: run superseded");
    pending_.clear();
    current_.round = state.round;
    current_.w.assign(state.w.values().begin(), state.w.values().end());
    current_.v_bar_prev = state.v_bar_prev.values;
    current_.status = RunStatus::running;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(round_timeout_);
    if (!cv_.wait_until(lock, deadline, [&] { return pending_.size() == n_clients_; })) {
        throw std::runtime_error("WireServer: timed out waiting for client updates in round " + std::to_string(state.round));
    }
    std::vector<ClientUpdate> out;
    for (auto& [id, u] : pending_) out.push_back(std::move(u));
    pending_.clear();
    current_.status = RunStatus::waiting;
    return out;
}

void WireServer::finish() {
    std::lock_guard lock(mu_);
    current_.status = RunStatus::done;
}

bool WireServer::wait_clients_done(double seconds) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, std::chrono::duration<double>(seconds), [&] {
        for (std::size_t i = 0; i < n_clients_; ++i) {
            if (registered_[i] && !saw_done_[i]) return false;
        }
        return true;
    });
}

namespace {

// Retries transport failures with exponential backoff; HTTP statuses are returned as-is.
template <typename Call>
httplib::Result with_retries(const ClientOptions& options, Call&& call) {
    int delay = options.backoff_ms;
    for (int attempt = 1;; ++attempt) {
        httplib::Result res = call();
        if (res) return res;
        if (attempt >= options.max_attempts) {
            throw std::runtime_error("connection failed after " + std::to_string(attempt) +
                                     " attempts: " + httplib::to_string(res.error()));
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
    }
}

}  // namespace

std::size_t run_client(const std::string& host, int port, const LabeledDataset& silo, const ClientOptions& options) {
    if (silo.empty()) throw std::invalid_argument("run_client: empty silo");
    httplib::Client http(host, port);
    http.set_read_timeout(600, 0);
    http.set_write_timeout(600, 0);

    json reg = json::object();
    if (options.client_id) reg["client_id"] = *options.client_id;
    const auto reg_res = with_retries(options, [&] { return http.Post("/register", reg.dump(), "application/json"); });
    if (reg_res->status != 200) throw std::runtime_error("register rejected: " + reg_res->body);
    const ClientSetup setup = setup_from_json(json::parse(reg_res->body));
    if (silo.inputs.cols() != setup.spec.input_size()) throw std::runtime_error("run_client: silo width does not match the model");

    std::int64_t last_run = -1;
    std::int64_t last_round = -1;
    std::size_t uploaded = 0;
    ParamVector w(setup.spec);
    while (true) {
        const std::string path = "/round?client_id=" + std::to_string(setup.client_id) +
                                 "&run=" + std::to_string(last_run) + "&round=" + std::to_string(last_round);
        const auto res = with_retries(options, [&] { return http.Get(path); });
        if (res->status != 200) throw std::runtime_error("round request failed: " + res->body);
        const json j = json::parse(res->body);
        if (j.at("status") == "unchanged" || j.at("status") == "waiting") {
            std::this_thread::sleep_for(std::chrono::milliseconds(options.poll_ms));
            continue;
        }
        const RoundMessage m = round_from_json(j);
        if (m.status == RunStatus::done) return uploaded;
        if (m.run == last_run && m.round == last_round) continue;
        if (m.w.size() != w.size()) throw std::runtime_error("run_client: broadcast parameter length mismatch");
        std::copy(m.w.begin(), m.w.end(), w.values().begin());

        RoundConfig config;
        config.mode = m.mode;
        config.lambda = m.lambda;
        config.seed = m.seed;
        config.batch_size = setup.batch_size;
        config.geo_chunk = setup.geo_chunk;
        UpdateMessage up{m.run, m.round,
                         client_update(setup.spec, silo, setup.client_id, m.round, w, m.v_bar_prev, config)};
        const std::string body = to_json(up).dump();
        const auto post = with_retries(options, [&] { return http.Post("/update", body, "application/json"); });
        // 409 means the server moved on (or already has this upload); keep polling.
        if (post->status != 200 && post->status != 409) throw std::runtime_error("update rejected: " + post->body);
        if (post->status == 200) ++uploaded;
        last_run = m.run;
        last_round = m.round;
    }
}

}  // namespace fedilc
