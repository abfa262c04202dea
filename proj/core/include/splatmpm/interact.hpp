#pragma once

// Live interactive simulation: a session that owns the driving-particle state,
// a command queue drained at frame boundaries, the websocket wire codec, and a
// server streaming positions over ws://host:port/sim.

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "splatmpm/drive.hpp"
#include "splatmpm/la3.hpp"
#include "splatmpm/mpm.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::interact {

struct Impulse {
  Vec3 point;
  Vec3 dir;  // normalized by validate()
  double magnitude = 0.0;
  double radius = 1.0;

  /// Throws ValidationError unless magnitude >= 0, radius > 0 and dir is
  /// non-zero; normalizes dir.
  void validate();
};

/// dv_q = magnitude * dir * exp(-|x_q - point|^2 / (2 (radius / 2)^2)) for
/// every particle with |x_q - point| <= radius. Returns sum m_q dv_q.
Vec3 apply_impulse(MaterialPoints& pts, const Impulse& imp);

struct ResetCommand {};
struct PauseCommand {
  bool value = true;
};
struct SetParamsCommand {
  std::optional<double> fps;
  std::optional<int> substeps;
  std::optional<std::size_t> max_points;  // 0 streams every particle
};
using Command = std::variant<Impulse, ResetCommand, PauseCommand, SetParamsCommand>;

/// Parses one client text message. Throws ValidationError on malformed JSON,
/// an unknown type, or out-of-range values.
Command parse_command(const std::string& text);

constexpr std::uint8_t kFrameTag = 0x01;

/// Tag byte, uint32 frame index, uint32 count, count x 3 float32, little endian.
std::string encode_frame(std::uint32_t index, const std::vector<Vec3>& positions);
struct DecodedFrame {
  std::uint32_t index = 0;
  std::vector<std::array<float, 3>> positions;
};
/// Throws ValidationError on a bad tag or length.
DecodedFrame decode_frame(const std::string& bytes);

/// Evenly strided subset of [0, n) of size min(n, cap); cap 0 keeps all.
std::vector<std::size_t> stream_indices(std::size_t n, std::size_t cap);

std::string meta_message(std::size_t count, double fps, const Vec3& lo, const Vec3& hi);
std::string ack_message(const Vec3& injected_momentum);
std::string error_message(const std::string& what);

/// Reply routed to the client that sent the command.
struct Reply {
  std::uint64_t client = 0;
  std::string text;
};

struct FrameOutput {
  std::uint32_t index = 0;
  std::vector<Vec3> positions;  // streamed subset
  std::vector<Reply> replies;   // produced while draining the queue
  std::optional<std::string> broadcast_error;
};

/// Owns the simulation state. enqueue() may be called from any thread;
/// step_frame() must only be called by the single simulation loop.
class Session {
 public:
  Session(MaterialPoints rest, SimConfig cfg, std::size_t max_points = 0);

  void enqueue(std::uint64_t client, Command cmd);

  /// Drains the queue, then advances one frame of substeps unless paused.
  /// A simulation failure restores the rest state and reports an error.
  FrameOutput step_frame();

  double fps() const;
  int substeps() const;
  bool paused() const;
  std::size_t stream_count() const;
  Vec3 bounds_lo() const { return lo_; }
  Vec3 bounds_hi() const { return hi_; }
  const MaterialPoints& state() const { return pts_; }
  const MaterialPoints& rest() const { return rest_; }
  double time() const { return time_; }

 private:
  std::optional<std::string> apply(const Command& cmd, Vec3* momentum);
  std::vector<Vec3> streamed() const;

  MaterialPoints rest_, pts_;
  SimConfig cfg_;
  mpm::GridState grid_;
  Vec3 lo_, hi_;
  double time_ = 0.0;
  bool paused_ = false;
  std::size_t max_points_ = 0;
  std::uint32_t frame_ = 0;

  mutable std::mutex mutex_;  // guards queue_ and the values read by accessors
  std::vector<std::pair<std::uint64_t, Command>> queue_;
};

/// Websocket server on ws://address:port/sim. One simulation thread paces
/// frames at the session fps and drops broadcasts, never substeps, when late.
class Server {
 public:
  /// port 0 binds an ephemeral port. Throws IoError if the port cannot be bound.
  Server(std::unique_ptr<Session> session, unsigned short port, const std::string& address = "127.0.0.1");
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  /// Starts the network and simulation threads and returns.
  void start();
  /// Blocks until stop() is called from another thread.
  void wait();
  void stop();

  std::uint64_t frames_simulated() const;
  std::uint64_t frames_dropped() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace splatmpm::interact
