#pragma once

// Live-training service: WebSocket endpoint /train streaming frames,
// telemetry and status, and accepting feedback and control messages. Plain
// HTTP GETs are answered from an optional static directory.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "deeptamer/envsim.hpp"
#include "deeptamer/feedback_queue.hpp"
#include "deeptamer/session.hpp"

namespace dtamer {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::vector<std::uint8_t> out(beast::detail::base64::decoded_size(text.size()));
  const auto [written, read] = beast::detail::base64::decode(out.data(), text.data(), text.size());
  // The decoder stops at padding or at the first invalid character.
  std::size_t pad = 0;
  while (pad < 2 && pad < text.size() && text[text.size() - 1 - pad] == '=') ++pad;
  if (text.size() % 4 != 0 || read + pad != text.size()) throw std::invalid_argument("invalid base64");
  out.resize(written);
  return out;
}

// Wire messages.

inline nlohmann::json frame_message(const StepView& v) {
  const auto& o = v.observation;
  return {{"type", "frame"},
          {"step", v.step},
          {"t", v.t},
          {"width", o.width},
          {"height", o.height},
          {"pixels", base64_encode(quantize_frame(o.newest(), o.frame_size()))},
          {"score", v.episode_score},
          {"episode", v.episode},
          {"q_values", v.q_values}};
}

inline nlohmann::json telemetry_message(const Telemetry& t) {
  return {{"type", "telemetry"},
          {"feedback_count", t.feedback_count},
          {"update_count", t.update_count},
          {"mean_recent_score", t.mean_recent_score},
          {"dropped_feedback", t.dropped_feedback}};
}

inline nlohmann::json status_message(SessionControl::State s) {
  return {{"type", "status"}, {"state", to_string(s)}};
}

struct GatewayOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0 picks a free port
  std::string static_dir;
  int telemetry_every_steps = 10;
  std::size_t max_pending_writes = 256;  // per client; frames beyond this are dropped
};

class Gateway;

namespace gw_detail {

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, Gateway& gw) : ws_(std::move(socket)), gw_(gw) {}

  void run(http::request<http::string_body> req);
  void send(std::shared_ptr<const std::string> msg, bool droppable);
  std::size_t pending_writes() const { return outbox_.size(); }
  void close() {
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
  }

 private:
  void on_accept(beast::error_code ec);
  void do_read();
  void on_read(beast::error_code ec, std::size_t);
  void do_write();
  void on_write(beast::error_code ec, std::size_t);

  websocket::stream<beast::tcp_stream> ws_;
  Gateway& gw_;
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<const std::string>> outbox_;
  bool closed_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, Gateway& gw) : stream_(std::move(socket)), gw_(gw) {}

  void run() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_,
                     beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

 private:
  void on_read(beast::error_code ec, std::size_t);
  void reply(http::response<http::string_body> res);

  beast::tcp_stream stream_;
  Gateway& gw_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace gw_detail

class Gateway {
 public:
  Gateway(GatewayOptions opts, FeedbackQueue& queue, const SessionClock& clock,
          SessionControl& control)
      : opts_(std::move(opts)), queue_(queue), clock_(clock), control_(control), acceptor_(ioc_) {}

  ~Gateway() { stop(); }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Binds and starts the I/O thread.
  void start() {
    const tcp::endpoint ep(net::ip::make_address(opts_.address), opts_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(net::socket_base::max_listen_connections);
    port_ = acceptor_.local_endpoint().port();
    do_accept();
    io_thread_ = std::thread([this] { ioc_.run(); });
  }

  // Stops accepting, gives queued messages up to `drain` to go out, then
  // closes every connection.
  void stop(std::chrono::milliseconds drain = std::chrono::milliseconds(1000)) {
    if (!io_thread_.joinable()) return;
    net::post(ioc_, [this] {
      beast::error_code ec;
      acceptor_.close(ec);
    });
    const auto deadline = std::chrono::steady_clock::now() + drain;
    while (std::chrono::steady_clock::now() < deadline) {
      std::promise<std::size_t> pending;
      auto f = pending.get_future();
      net::post(ioc_, [this, &pending] {
        std::size_t n = 0;
        for (const auto& s : sessions_) n += s->pending_writes();
        pending.set_value(n);
      });
      if (f.get() == 0) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    net::post(ioc_, [this] {
      for (const auto& s : sessions_) s->close();
    });
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    work_.reset();
    ioc_.stop();
    io_thread_.join();
  }

  unsigned short port() const { return port_; }
  SessionControl& control() { return control_; }

  // Called from the session loop once per environment step.
  void publish_step(const StepView& v, const Telemetry& t) {
    broadcast(frame_message(v).dump(), true);
    if (v.step == 1 || (opts_.telemetry_every_steps > 0 && v.step % opts_.telemetry_every_steps == 0)) {
      broadcast(telemetry_message(t).dump(), false);
    }
    frames_sent_.fetch_add(1);
  }

  void publish_status(SessionControl::State s) { broadcast(status_message(s).dump(), false); }

  std::uint64_t malformed_messages() const { return malformed_.load(); }
  std::uint64_t feedback_received() const { return feedback_.load(); }
  std::uint64_t ignored_messages() const { return ignored_.load(); }
  std::uint64_t frames_published() const { return frames_sent_.load(); }
  std::size_t connections() const { return connections_.load(); }

  // Attaches this gateway to a session run.
  SessionHooks hooks(SessionClock* clock) {
    SessionHooks h;
    h.clock = clock;
    h.queue = &queue_;
    h.control = &control_;
    h.on_step = [this](const StepView& v, const Telemetry& t) { publish_step(v, t); };
    control_.on_change([this](SessionControl::State s) { publish_status(s); });
    return h;
  }

 private:
  friend class gw_detail::WsSession;
  friend class gw_detail::HttpSession;

  void do_accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;  // acceptor closed
      std::make_shared<gw_detail::HttpSession>(std::move(socket), *this)->run();
      do_accept();
    });
  }

  void broadcast(std::string text, bool droppable) {
    auto msg = std::make_shared<const std::string>(std::move(text));
    net::post(ioc_, [this, msg, droppable] {
      for (const auto& s : sessions_) s->send(msg, droppable);
    });
  }

  // I/O thread only below.

  void on_open(const std::shared_ptr<gw_detail::WsSession>& s) {
    sessions_.insert(s);
    connections_.store(sessions_.size());
    if (!trainer_) trainer_ = s.get();
    s->send(std::make_shared<const std::string>(status_message(control_.state()).dump()), false);
  }

  void on_close(gw_detail::WsSession* s) {
    for (auto it = sessions_.begin(); it != sessions_.end(); ++it) {
      if (it->get() == s) {
        sessions_.erase(it);
        break;
      }
    }
    connections_.store(sessions_.size());
    if (trainer_ == s) {
      trainer_ = nullptr;
      control_.pause();
    }
  }

  void on_message(gw_detail::WsSession* s, const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      ++malformed_;
      return;
    }
    if (!j.is_object() || !j.contains("type") || !j.at("type").is_string()) {
      ++malformed_;
      return;
    }
    if (s != trainer_) {
      ++ignored_;
      return;
    }
    const std::string type = j.at("type");
    if (type == "feedback") {
      if (!j.contains("h") || !j.at("h").is_number() || !std::isfinite(j.at("h").get<double>())) {
        ++malformed_;
        return;
      }
      queue_.push_now(j.at("h").get<double>(), FeedbackSource::kHuman, clock_);
      ++feedback_;
    } else if (type == "control") {
      const std::string cmd = j.value("cmd", "");
      if (cmd == "start") control_.start();
      else if (cmd == "pause") control_.pause();
      else if (cmd == "reset") control_.request_reset();
      else ++malformed_;
    } else {
      ++malformed_;
    }
  }

  std::optional<std::filesystem::path> static_file(const std::string& target) const {
    if (opts_.static_dir.empty()) return std::nullopt;
    std::string path = target.substr(0, target.find('?'));
    if (path.empty() || path == "/") path = "/index.html";
    if (path.find("..") != std::string::npos) return std::nullopt;
    const auto full = std::filesystem::path(opts_.static_dir) / path.substr(1);
    if (!std::filesystem::is_regular_file(full)) return std::nullopt;
    return full;
  }

  GatewayOptions opts_;
  FeedbackQueue& queue_;
  const SessionClock& clock_;
  SessionControl& control_;
  net::io_context ioc_;
  // Keeps run() alive between connections and through stop().
  net::executor_work_guard<net::io_context::executor_type> work_ = net::make_work_guard(ioc_);
  tcp::acceptor acceptor_;
  std::thread io_thread_;
  unsigned short port_ = 0;
  std::set<std::shared_ptr<gw_detail::WsSession>> sessions_;
  gw_detail::WsSession* trainer_ = nullptr;
  std::atomic<std::uint64_t> malformed_{0};
  std::atomic<std::uint64_t> feedback_{0};
  std::atomic<std::uint64_t> ignored_{0};
  std::atomic<std::uint64_t> frames_sent_{0};
  std::atomic<std::size_t> connections_{0};
};

namespace gw_detail {

inline void WsSession::run(http::request<http::string_body> req) {
  beast::get_lowest_layer(ws_).expires_never();
  ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
  ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
}

inline void WsSession::on_accept(beast::error_code ec) {
  if (ec) return;
  gw_.on_open(shared_from_this());
  do_read();
}

inline void WsSession::do_read() {
  ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
}

inline void WsSession::on_read(beast::error_code ec, std::size_t) {
  if (ec) {
    closed_ = true;
    gw_.on_close(this);
    return;
  }
  gw_.on_message(this, beast::buffers_to_string(buffer_.data()));
  buffer_.consume(buffer_.size());
  do_read();
}

inline void WsSession::send(std::shared_ptr<const std::string> msg, bool droppable) {
  if (closed_) return;
  if (droppable && outbox_.size() >= gw_.opts_.max_pending_writes) return;
  outbox_.push_back(std::move(msg));
  if (outbox_.size() == 1) do_write();
}

inline void WsSession::do_write() {
  ws_.text(true);
  ws_.async_write(net::buffer(*outbox_.front()),
                  beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
}

inline void WsSession::on_write(beast::error_code ec, std::size_t) {
  if (ec) {
    closed_ = true;
    outbox_.clear();
    return;
  }
  outbox_.pop_front();
  if (!outbox_.empty()) do_write();
}

inline void HttpSession::on_read(beast::error_code ec, std::size_t) {
  if (ec) return;
  if (websocket::is_upgrade(req_)) {
    if (req_.target() != "/train") {
      http::response<http::string_body> res{http::status::not_found, req_.version()};
      res.body() = "unknown endpoint";
      res.prepare_payload();
      reply(std::move(res));
      return;
    }
    std::make_shared<WsSession>(stream_.release_socket(), gw_)->run(std::move(req_));
    return;
  }
  http::response<http::string_body> res{http::status::ok, req_.version()};
  res.keep_alive(false);
  const auto file = req_.method() == http::verb::get
                        ? gw_.static_file(std::string(req_.target()))
                        : std::nullopt;
  if (!file) {
    res.result(http::status::not_found);
    res.set(http::field::content_type, "text/plain");
    res.body() = "not found";
  } else {
    std::ifstream is(*file, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    res.body() = ss.str();
    const auto ext = file->extension().string();
    const char* type = ext == ".html"  ? "text/html"
                       : ext == ".js"  ? "application/javascript"
                       : ext == ".css" ? "text/css"
                       : ext == ".json" ? "application/json"
                       : ext == ".svg" ? "image/svg+xml"
                       : ext == ".png" ? "image/png"
                                       : "application/octet-stream";
    res.set(http::field::content_type, type);
  }
  res.prepare_payload();
  reply(std::move(res));
}

inline void HttpSession::reply(http::response<http::string_body> res) {
  auto sp = std::make_shared<http::response<http::string_body>>(std::move(res));
  http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code, std::size_t) {
    beast::error_code ec;
    self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  });
}

}  // namespace gw_detail

// Headless client speaking the wire protocol; used by tests and scripted
// trainers.
class WireClient {
 public:
  WireClient() = default;
  ~WireClient() { close(); }

  WireClient(const WireClient&) = delete;
  WireClient& operator=(const WireClient&) = delete;

  void connect(const std::string& host, unsigned short port, const std::string& target = "/train") {
    tcp::resolver resolver(ioc_);
    const auto results = resolver.resolve(host, std::to_string(port));
    net::connect(ws_.next_layer(), results.begin(), results.end());
    ws_.handshake(host + ":" + std::to_string(port), target);
    do_read();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  void send(const nlohmann::json& msg) { send_text(msg.dump()); }

  void send_text(std::string text) {
    auto sp = std::make_shared<std::string>(std::move(text));
    net::post(ioc_, [this, sp] {
      outbox_.push_back(sp);
      if (outbox_.size() == 1) do_write();
    });
  }

  void send_feedback(double h) { send({{"type", "feedback"}, {"h", h}}); }
  void send_control(const std::string& cmd) { send({{"type", "control"}, {"cmd", cmd}}); }

  // Waits for the first unconsumed message matching `pred` and consumes it.
  std::optional<nlohmann::json> wait_for(const std::function<bool(const nlohmann::json&)>& pred,
                                         std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      for (auto it = inbox_.begin(); it != inbox_.end(); ++it) {
        if (pred(*it)) {
          auto j = std::move(*it);
          inbox_.erase(it);
          return j;
        }
      }
      if (closed_ || cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
        // One last scan after waking.
        for (auto it = inbox_.begin(); it != inbox_.end(); ++it) {
          if (pred(*it)) {
            auto j = std::move(*it);
            inbox_.erase(it);
            return j;
          }
        }
        return std::nullopt;
      }
    }
  }

  std::optional<nlohmann::json> wait_for_type(const std::string& type,
                                              std::chrono::milliseconds timeout) {
    return wait_for([&](const nlohmann::json& j) { return j.value("type", "") == type; }, timeout);
  }

  // All messages received so far, consumed.
  std::vector<nlohmann::json> drain() {
    std::lock_guard lock(mu_);
    std::vector<nlohmann::json> out(inbox_.begin(), inbox_.end());
    inbox_.clear();
    return out;
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  void close() {
    if (!thread_.joinable()) return;
    net::post(ioc_, [this] {
      beast::error_code ec;
      ws_.next_layer().shutdown(tcp::socket::shutdown_both, ec);
      ws_.next_layer().close(ec);
    });
    thread_.join();
  }

 private:
  void do_read() {
    ws_.async_read(buffer_, [this](beast::error_code ec, std::size_t) {
      if (ec) {
        std::lock_guard lock(mu_);
        closed_ = true;
        cv_.notify_all();
        return;
      }
      const auto text = beast::buffers_to_string(buffer_.data());
      buffer_.consume(buffer_.size());
      {
        std::lock_guard lock(mu_);
        try {
          inbox_.push_back(nlohmann::json::parse(text));
        } catch (const nlohmann::json::exception&) {
          inbox_.push_back({{"type", "unparseable"}, {"text", text}});
        }
      }
      cv_.notify_all();
      do_read();
    });
  }

  void do_write() {
    ws_.text(true);
    ws_.async_write(net::buffer(*outbox_.front()), [this](beast::error_code ec, std::size_t) {
      if (ec) {
        outbox_.clear();
        return;
      }
      outbox_.pop_front();
      if (!outbox_.empty()) do_write();
    });
  }

  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_{ioc_};
  beast::flat_buffer buffer_;
  std::deque<std::shared_ptr<std::string>> outbox_;
  std::thread thread_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<nlohmann::json> inbox_;
  bool closed_ = false;
};

// Runs a session paced by the wall clock with the gateway attached. Returns
// once the session ends or `control.stop()` is called.
inline SessionResult run_served_session(const SessionConfig& cfg, const GatewayOptions& opts,
                                        const std::function<void(Gateway&)>& on_ready = {}) {
  WallClock clock;
  FeedbackQueue queue;
  SessionControl control;
  Gateway gw(opts, queue, clock, control);
  gw.start();
  if (on_ready) on_ready(gw);
  SessionHooks hooks = gw.hooks(&clock);
  auto result = run_session(cfg, hooks);
  gw.publish_status(SessionControl::State::kDone);
  gw.stop();
  return result;
}

}  // namespace dtamer
