#pragma once

// HTTP+JSON transport for federated rounds: one server process owns the model
// and evaluation, client processes each hold one silo and upload gradients.
//
//   POST /register  {"client_id": k}?           -> {"client_id", model and batching config}
//   GET  /round                                 -> {"status", "run", "seed", "round", "mode", "lambda", "w", "v_bar_prev"}
//   POST /update    {"run", "round", "client_id", "grad", "var_diag", "n"} -> {"ack": true}
//
// Stale run/round or a repeated upload gets 409; malformed bodies get 400.

#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedilc/datasets.hpp"
#include "fedilc/federation.hpp"

namespace httplib {
class Server;
}

namespace fedilc {

class WireError : public std::runtime_error {
public:
    WireError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

enum class RunStatus { waiting, running, done };

struct RoundMessage {
    RunStatus status = RunStatus::waiting;
    std::int64_t run = 0;
    std::uint64_t seed = 0;
    std::int64_t round = 0;
    AlgoMode mode = AlgoMode::fed_sgd;
    double lambda = 0.0;
    std::vector<double> w;
    std::vector<double> v_bar_prev;
};

struct UpdateMessage {
    std::int64_t run = 0;
    std::int64_t round = 0;
    ClientUpdate update;
};

/// Everything a client needs besides its silo and the per-round broadcast.
struct ClientSetup {
    std::size_t client_id = 0;
    ModelSpec spec;
    std::size_t batch_size = 64;
    std::size_t geo_chunk = 8;
};

nlohmann::json to_json(const RoundMessage& m);
RoundMessage round_from_json(const nlohmann::json& j);
nlohmann::json to_json(const UpdateMessage& m);
/// Throws WireError(400) on any missing, mistyped or non-finite field.
UpdateMessage update_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ClientSetup& s);
ClientSetup setup_from_json(const nlohmann::json& j);

class WireServer {
public:
    WireServer(ModelSpec spec, std::size_t n_clients, std::size_t batch_size, std::size_t geo_chunk);
    ~WireServer();
    WireServer(const WireServer&) = delete;
    WireServer& operator=(const WireServer&) = delete;

    /// Binds and serves in a background thread; port 0 picks a free port.
    /// Returns the bound port.
    int start(const std::string& host, int port);
    void stop();

    /// Announces a new run; the returned source publishes each round and
    /// blocks until every client has uploaded for it.
    UpdateSource begin_run(const RoundConfig& config);
    /// Marks the whole session finished so polling clients exit.
    void finish();
    /// After finish(): waits until every registered client has seen the
    /// done status, up to `seconds`. Returns whether all of them did.
    bool wait_clients_done(double seconds);

    /// Seconds to wait for a round's uploads before giving up.
    void set_round_timeout(double seconds) { round_timeout_ = seconds; }

private:
    void handle_register(const std::string& body, int& status, std::string& out);
    void handle_round(std::optional<std::size_t> client, int& status, std::string& out);
    void handle_update(const std::string& body, int& status, std::string& out);
    std::vector<ClientUpdate> collect(const ServerState& state, std::int64_t run);

    ModelSpec spec_;
    std::size_t n_clients_;
    std::size_t batch_size_;
    std::size_t geo_chunk_;
    double round_timeout_ = 600.0;

    std::mutex mu_;
    std::condition_variable cv_;
    std::vector<bool> registered_;
    std::vector<bool> saw_done_;
    RoundMessage current_;
    RoundConfig config_;
    std::map<std::size_t, ClientUpdate> pending_;

    std::unique_ptr<httplib::Server> http_;
    std::thread thread_;
};

struct ClientOptions {
    std::optional<std::size_t> client_id;  // requested id; the server assigns one otherwise
    int max_attempts = 5;                  // consecutive connection failures before giving up
    int backoff_ms = 100;                  // doubled after each failure
    int poll_ms = 2;
};

/// Registers, then answers rounds until the server reports done. Returns the
/// number of updates uploaded. Throws after max_attempts consecutive
/// connection failures.
std::size_t run_client(const std::string& host, int port, const LabeledDataset& silo,
                       const ClientOptions& options = {});

}  // namespace fedilc
