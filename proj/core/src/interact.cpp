#include "splatmpm/interact.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <map>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "splatmpm/errors.hpp"

namespace splatmpm::interact {

using nlohmann::json;

void Impulse::validate() {
  if (!std::isfinite(magnitude) || magnitude < 0.0) throw ValidationError("poke: magnitude must be >= 0");
  if (!std::isfinite(radius) || radius <= 0.0) throw ValidationError("poke: radius must be > 0");
  if (!is_finite(point)) throw ValidationError("poke: point must be finite");
  const double n = norm(dir);
  if (!std::isfinite(n) || n == 0.0) throw ValidationError("poke: dir must be a non-zero vector");
  dir = dir / n;
}

Vec3 apply_impulse(MaterialPoints& pts, const Impulse& imp) {
  Vec3 momentum;
  if (imp.magnitude == 0.0) return momentum;
  const double s = 0.5 * imp.radius;
  const double r2 = imp.radius * imp.radius;
  for (std::size_t q = 0; q < pts.size(); ++q) {
    const double d2 = squared_norm(pts.x[q] - imp.point);
    if (d2 > r2) continue;
    const Vec3 dv = imp.magnitude * std::exp(-d2 / (2.0 * s * s)) * imp.dir;
    pts.v[q] += dv;
    momentum += pts.mass[q] * dv;
  }
  return momentum;
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      throw ValidationError("unknown key '" + key + "'");
  }
}

const json& required(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ValidationError(std::string("missing key '") + key + "'");
  return *it;
}

double number(const json& j, const char* key) {
  if (!j.is_number()) throw ValidationError(std::string("'") + key + "' must be a number");
  return j.get<double>();
}

Vec3 vec3(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 3 || !j[0].is_number() || !j[1].is_number() || !j[2].is_number())
    throw ValidationError(std::string("'") + key + "' must be an array of 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

}  // namespace

Command parse_command(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed message: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("message must be a JSON object");
  const json& type = required(j, "type");
  if (!type.is_string()) throw ValidationError("'type' must be a string");
  const std::string t = type.get<std::string>();
  if (t == "poke") {
    check_keys(j, {"type", "point", "dir", "magnitude", "radius"});
    Impulse imp;
    imp.point = vec3(required(j, "point"), "point");
    imp.dir = vec3(required(j, "dir"), "dir");
    imp.magnitude = number(required(j, "magnitude"), "magnitude");
    imp.radius = number(required(j, "radius"), "radius");
    imp.validate();
    return imp;
  }
  if (t == "reset") {
    check_keys(j, {"type"});
    return ResetCommand{};
  }
  if (t == "pause") {
    check_keys(j, {"type", "value"});
    const json& v = required(j, "value");
    if (!v.is_boolean()) throw ValidationError("'value' must be a boolean");
    return PauseCommand{v.get<bool>()};
  }
  if (t == "set_params") {
    check_keys(j, {"type", "fps", "substeps", "max_points"});
    SetParamsCommand c;
    if (j.contains("fps")) {
      const double fps = number(j["fps"], "fps");
      if (!std::isfinite(fps) || fps <= 0.0) throw ValidationError("'fps' must be > 0");
      c.fps = fps;
    }
    if (j.contains("substeps")) {
      const json& s = j["substeps"];
      if (!s.is_number_integer() || s.get<long long>() < 1) throw ValidationError("'substeps' must be an integer >= 1");
      c.substeps = static_cast<int>(s.get<long long>());
    }
    if (j.contains("max_points")) {
      const json& m = j["max_points"];
      if (!m.is_number_integer() || m.get<long long>() < 0)
        throw ValidationError("'max_points' must be an integer >= 0");
      c.max_points = static_cast<std::size_t>(m.get<long long>());
    }
    return c;
  }
  throw ValidationError("unknown message type '" + t + "'");
}

std::string encode_frame(std::uint32_t index, const std::vector<Vec3>& positions) {
  std::string out;
  out.reserve(9 + 12 * positions.size());
  out.push_back(static_cast<char>(kFrameTag));
  put_u32(out, index);
  put_u32(out, static_cast<std::uint32_t>(positions.size()));
  for (const Vec3& p : positions)
    for (double c : {p.x, p.y, p.z}) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(c)));
  return out;
}

DecodedFrame decode_frame(const std::string& bytes) {
  if (bytes.size() < 9) throw ValidationError("frame: shorter than its header");
  if (static_cast<std::uint8_t>(bytes[0]) != kFrameTag) throw ValidationError("frame: unknown tag");
  DecodedFrame f;
  f.index = get_u32(bytes, 1);
  const std::uint32_t count = get_u32(bytes, 5);
  if (bytes.size() != 9 + 12 * static_cast<std::size_t>(count)) throw ValidationError("frame: length does not match count");
  f.positions.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    for (int c = 0; c < 3; ++c) f.positions[i][c] = std::bit_cast<float>(get_u32(bytes, 9 + 12 * i + 4 * c));
  return f;
}

std::vector<std::size_t> stream_indices(std::size_t n, std::size_t cap) {
  const std::size_t m = (cap == 0) ? n : std::min(n, cap);
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i * n / m;
  return idx;
}

std::string meta_message(std::size_t count, double fps, const Vec3& lo, const Vec3& hi) {
  return json{{"type", "meta"}, {"count", count}, {"fps", fps}, {"bounds", {lo.x, lo.y, lo.z, hi.x, hi.y, hi.z}}}.dump();
}

std::string ack_message(const Vec3& injected_momentum) {
  return json{{"type", "ack"}, {"injected_momentum", vec_json(injected_momentum)}}.dump();
}

std::string error_message(const std::string& what) { return json{{"type", "error"}, {"message", what}}.dump(); }

// ---------------------------------------------------------------------------
// Session

Session::Session(MaterialPoints rest, SimConfig cfg, std::size_t max_points)
    : rest_(std::move(rest)), pts_(rest_), cfg_(std::move(cfg)), max_points_(max_points) {
  cfg_.validate();
  if (rest_.size() == 0) throw ValidationError("session: no particles");
  mpm::check_domain(rest_, cfg_);
  grid_ = mpm::GridState(cfg_);
  lo_ = hi_ = rest_.x[0];
  for (const Vec3& x : rest_.x) {
    lo_ = {std::min(lo_.x, x.x), std::min(lo_.y, x.y), std::min(lo_.z, x.z)};
    hi_ = {std::max(hi_.x, x.x), std::max(hi_.y, x.y), std::max(hi_.z, x.z)};
  }
}

void Session::enqueue(std::uint64_t client, Command cmd) {
  std::lock_guard lock(mutex_);
  queue_.emplace_back(client, std::move(cmd));
}

double Session::fps() const {
  std::lock_guard lock(mutex_);
  return cfg_.fps;
}

int Session::substeps() const {
  std::lock_guard lock(mutex_);
  return cfg_.substeps;
}

bool Session::paused() const {
  std::lock_guard lock(mutex_);
  return paused_;
}

std::size_t Session::stream_count() const {
  std::lock_guard lock(mutex_);
  return stream_indices(rest_.size(), max_points_).size();
}

std::optional<std::string> Session::apply(const Command& cmd, Vec3* momentum) {
  if (const auto* imp = std::get_if<Impulse>(&cmd)) {
    *momentum = apply_impulse(pts_, *imp);
    return ack_message(*momentum);
  }
  if (std::holds_alternative<ResetCommand>(cmd)) {
    pts_ = rest_;
    grid_ = mpm::GridState(cfg_);
    time_ = 0.0;
    return std::nullopt;
  }
  if (const auto* p = std::get_if<PauseCommand>(&cmd)) {
    paused_ = p->value;
    return std::nullopt;
  }
  const auto& s = std::get<SetParamsCommand>(cmd);
  if (s.fps) cfg_.fps = *s.fps;
  if (s.substeps) cfg_.substeps = *s.substeps;
  if (s.max_points) max_points_ = *s.max_points;
  return std::nullopt;
}

std::vector<Vec3> Session::streamed() const {
  std::vector<Vec3> out;
  for (std::size_t i : stream_indices(pts_.size(), max_points_)) out.push_back(pts_.x[i]);
  return out;
}

FrameOutput Session::step_frame() {
  FrameOutput out;
  int substeps = 0;
  bool paused = false;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [client, cmd] : queue_) {
      Vec3 m;
      if (auto text = apply(cmd, &m)) out.replies.push_back({client, std::move(*text)});
    }
    queue_.clear();
    substeps = cfg_.substeps;
    paused = paused_;
  }
  if (!paused) {
    try {
      time_ = mpm::simulate_step(pts_, grid_, cfg_, substeps, time_);
    } catch (const std::runtime_error& e) {
      pts_ = rest_;
      grid_ = mpm::GridState(cfg_);
      time_ = 0.0;
      out.broadcast_error = std::string("simulation reset: ") + e.what();
    }
  }
  {
    std::lock_guard lock(mutex_);
    out.positions = streamed();
  }
  out.index = frame_++;
  return out;
}

// ---------------------------------------------------------------------------
// Server

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

namespace {

struct Outgoing {
  std::shared_ptr<const std::string> data;
  bool binary = false;
};

constexpr std::size_t kMaxPendingFrames = 4;

}  // namespace

struct Server::Impl {
  std::unique_ptr<Session> session;
  net::io_context ioc;
  tcp::acceptor acceptor;
  std::thread net_thread, sim_thread;
  std::atomic<bool> stopping{false};
  bool started = false;
  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  std::atomic<std::uint64_t> simulated{0}, dropped{0};

  class Connection;
  std::map<std::uint64_t, std::weak_ptr<Connection>> connections;  // network thread only
  std::uint64_t next_id = 1;

  Impl(std::unique_ptr<Session> s, unsigned short port, const std::string& address)
      : session(std::move(s)), acceptor(ioc) {
    const tcp::endpoint ep(net::ip::make_address(address), port);
    acceptor.open(ep.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
  }

  void accept();
  void sim_loop();
  void send_to(std::uint64_t id, Outgoing msg);
  void broadcast(Outgoing msg);
};

class Server::Impl::Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(tcp::socket socket, Impl& srv, std::uint64_t id) : ws_(std::move(socket)), srv_(srv), id_(id) {}

  void run() {
    http::async_read(ws_.next_layer(), buffer_, request_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_request(ec); });
  }

  void send(Outgoing msg) {
    if (closed_) return;
    if (msg.binary) {
      const auto frames = std::count_if(out_.begin(), out_.end(), [](const Outgoing& o) { return o.binary; });
      if (static_cast<std::size_t>(frames) >= kMaxPendingFrames) return;
    }
    out_.push_back(std::move(msg));
    if (out_.size() == 1 && open_) write_next();
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().close(ec);
  }

 private:
  void on_request(beast::error_code ec) {
    if (ec) return;
    if (request_.target() != "/sim" || !websocket::is_upgrade(request_)) {
      auto res = std::make_shared<http::response<http::string_body>>(http::status::not_found, request_.version());
      res->set(http::field::content_type, "text/plain");
      res->body() = "websocket endpoint is /sim\n";
      res->prepare_payload();
      http::async_write(ws_.next_layer(), *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
        beast::error_code ignored;
        self->ws_.next_layer().socket().shutdown(tcp::socket::shutdown_send, ignored);
      });
      return;
    }
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(request_, [self = shared_from_this()](beast::error_code e) { self->on_accept(e); });
  }

  void on_accept(beast::error_code ec) {
    if (ec) return;
    srv_.connections[id_] = weak_from_this();
    const Session& s = *srv_.session;
    out_.push_front({std::make_shared<const std::string>(
                         meta_message(s.stream_count(), s.fps(), s.bounds_lo(), s.bounds_hi())),
                     false});
    open_ = true;
    write_next();
    read();
  }

  void read() {
    ws_.async_read(in_, [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(beast::error_code ec) {
    if (ec) {
      srv_.connections.erase(id_);
      closed_ = true;
      return;
    }
    const bool text = ws_.got_text();
    const std::string msg = beast::buffers_to_string(in_.data());
    in_.consume(in_.size());
    if (!text) {
      send({std::make_shared<const std::string>(error_message("binary client messages are not supported")), false});
    } else {
      try {
        srv_.session->enqueue(id_, parse_command(msg));
      } catch (const ValidationError& e) {
        send({std::make_shared<const std::string>(error_message(e.what())), false});
      }
    }
    read();
  }

  void write_next() {
    if (out_.empty() || closed_) return;
    ws_.binary(out_.front().binary);
    ws_.async_write(net::buffer(*out_.front().data),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_write(ec); });
  }

  void on_write(beast::error_code ec) {
    if (ec) {
      srv_.connections.erase(id_);
      closed_ = true;
      return;
    }
    out_.pop_front();
    write_next();
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_, in_;
  http::request<http::string_body> request_;
  std::deque<Outgoing> out_;
  Impl& srv_;
  std::uint64_t id_;
  bool open_ = false, closed_ = false;
};

void Server::Impl::accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;
    std::make_shared<Connection>(std::move(socket), *this, next_id++)->run();
    accept();
  });
}

void Server::Impl::send_to(std::uint64_t id, Outgoing msg) {
  net::post(ioc, [this, id, msg = std::move(msg)] {
    auto it = connections.find(id);
    if (it == connections.end()) return;
    if (auto c = it->second.lock()) c->send(msg);
  });
}

void Server::Impl::broadcast(Outgoing msg) {
  net::post(ioc, [this, msg = std::move(msg)] {
    for (auto it = connections.begin(); it != connections.end();) {
      if (auto c = it->second.lock()) {
        c->send(msg);
        ++it;
      } else {
        it = connections.erase(it);
      }
    }
  });
}

void Server::Impl::sim_loop() {
  using clock = std::chrono::steady_clock;
  auto next = clock::now();
  auto last_publish = next;
  while (!stopping) {
    FrameOutput out = session->step_frame();
    ++simulated;
    for (Reply& r : out.replies) send_to(r.client, {std::make_shared<const std::string>(std::move(r.text)), false});
    if (out.broadcast_error)
      broadcast({std::make_shared<const std::string>(error_message(*out.broadcast_error)), false});

    next += std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / session->fps()));
    const auto now = clock::now();
    const bool late = now > next;
    if (!late || now - last_publish > std::chrono::seconds(1)) {
      broadcast({std::make_shared<const std::string>(encode_frame(out.index, out.positions)), true});
      last_publish = now;
    } else {
      ++dropped;
    }
    if (now - next > std::chrono::seconds(1)) next = now;
    std::unique_lock lock(stop_mutex);
    stop_cv.wait_until(lock, next, [this] { return stopping.load(); });
  }
}

Server::Server(std::unique_ptr<Session> session, unsigned short port, const std::string& address) {
  if (!session) throw ValidationError("server: no session");
  try {
    impl_ = std::make_unique<Impl>(std::move(session), port, address);
  } catch (const boost::system::system_error& e) {
    throw IoError("cannot listen on " + address + ":" + std::to_string(port) + ": " + e.what());
  }
}

Server::~Server() { stop(); }

unsigned short Server::port() const { return impl_->acceptor.local_endpoint().port(); }

void Server::start() {
  if (impl_->started) return;
  impl_->started = true;
  impl_->accept();
  impl_->net_thread = std::thread([this] {
    auto guard = net::make_work_guard(impl_->ioc);
    impl_->ioc.run();
  });
  impl_->sim_thread = std::thread([this] { impl_->sim_loop(); });
}

void Server::wait() {
  std::unique_lock lock(impl_->stop_mutex);
  impl_->stop_cv.wait(lock, [this] { return impl_->stopping.load(); });
}

void Server::stop() {
  if (!impl_) return;
  {
    std::lock_guard lock(impl_->stop_mutex);
    impl_->stopping = true;
  }
  impl_->stop_cv.notify_all();
  if (impl_->sim_thread.joinable()) impl_->sim_thread.join();
  if (!impl_->net_thread.joinable()) return;
  net::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
    for (auto& [id, weak] : impl_->connections)
      if (auto c = weak.lock()) c->close();
    impl_->connections.clear();
  });
  net::post(impl_->ioc, [this] { impl_->ioc.stop(); });
  impl_->net_thread.join();
}

std::uint64_t Server::frames_simulated() const { return impl_->simulated; }
std::uint64_t Server::frames_dropped() const { return impl_->dropped; }

}  // namespace splatmpm::interact
