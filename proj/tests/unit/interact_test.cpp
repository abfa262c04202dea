#include "splatmpm/interact.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "splatmpm/errors.hpp"

namespace splatmpm::interact {
namespace {

using nlohmann::json;

SimConfig sim_config() {
  SimConfig c;
  c.grid_resolution = 16;
  c.dt = 2e-4;
  c.substeps = 10;
  c.fps = 60;
  c.youngs_min = 1e2;
  c.youngs_max = 1e5;
  return c;
}

MaterialPoints block_points() {
  ParticleSet ps = make_block({{0.35, 0.4, 0.4}, {0.65, 0.6, 0.6}}, 6, 4, 4, 0.2, 7);
  compute_mass_volume(ps, sim_config());
  for (double& e : ps.points.youngs) e = 2e3;
  return ps.points;
}

void expect_state_eq(const MaterialPoints& a, const MaterialPoints& b) {
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.F, b.F);
  EXPECT_EQ(a.C, b.C);
}

TEST(Impulse, Validation) {
  Impulse imp{{0.5, 0.5, 0.5}, {0, 3, 4}, 1.0, 0.1};
  imp.validate();
  EXPECT_DOUBLE_EQ(norm(imp.dir), 1.0);
  EXPECT_DOUBLE_EQ(imp.dir.y, 0.6);
  Impulse neg = imp;
  neg.magnitude = -1;
  EXPECT_THROW(neg.validate(), ValidationError);
  Impulse flat = imp;
  flat.radius = 0;
  EXPECT_THROW(flat.validate(), ValidationError);
  Impulse nodir = imp;
  nodir.dir = {};
  EXPECT_THROW(nodir.validate(), ValidationError);
}

TEST(Impulse, ZeroMagnitudeIsNoOp) {
  MaterialPoints pts = block_points();
  const MaterialPoints before = pts;
  const Vec3 m = apply_impulse(pts, {{0.5, 0.5, 0.5}, {1, 0, 0}, 0.0, 1.0});
  EXPECT_EQ(m, Vec3{});
  expect_state_eq(pts, before);
}

TEST(Impulse, IsolatedParticleGainsFullMagnitude) {
  MaterialPoints pts;
  pts.resize(2);
  pts.x = {{0.5, 0.5, 0.5}, {0.9, 0.9, 0.9}};
  pts.mass = {2.0, 3.0};
  const Vec3 m = apply_impulse(pts, {{0.5, 0.5, 0.5}, {0, 0, 1}, 0.7, 0.2});
  EXPECT_EQ(pts.v[0], (Vec3{0, 0, 0.7}));
  EXPECT_EQ(pts.v[1], Vec3{});
  EXPECT_EQ(m, (Vec3{0, 0, 1.4}));
}

TEST(Impulse, FalloffAtHalfRadius) {
  MaterialPoints pts;
  pts.resize(1);
  pts.x = {{0.55, 0.5, 0.5}};
  pts.mass = {1.0};
  apply_impulse(pts, {{0.5, 0.5, 0.5}, {1, 0, 0}, 2.0, 0.1});
  EXPECT_NEAR(pts.v[0].x, 2.0 * std::exp(-0.5), 1e-12);
}

TEST(Impulse, ReportedMomentumMatchesSummation) {
  MaterialPoints pts = block_points();
  const MaterialPoints before = pts;
  const Vec3 m = apply_impulse(pts, {{0.45, 0.5, 0.5}, {0, 1, 0}, 1.5, 0.12});
  Vec3 sum;
  for (std::size_t q = 0; q < pts.size(); ++q) sum += pts.mass[q] * (pts.v[q] - before.v[q]);
  EXPECT_NEAR(norm(m - sum), 0.0, 1e-15);
  EXPECT_GT(m.y, 0.0);
}

TEST(Protocol, ParseCommands) {
  const Command poke =
      parse_command(R"({"type":"poke","point":[0.5,0.5,0.5],"dir":[2,0,0],"magnitude":1,"radius":0.1})");
  ASSERT_TRUE(std::holds_alternative<Impulse>(poke));
  EXPECT_EQ(std::get<Impulse>(poke).dir, (Vec3{1, 0, 0}));
  EXPECT_TRUE(std::holds_alternative<ResetCommand>(parse_command(R"({"type":"reset"})")));
  EXPECT_FALSE(std::get<PauseCommand>(parse_command(R"({"type":"pause","value":false})")).value);
  const auto sp = std::get<SetParamsCommand>(parse_command(R"({"type":"set_params","fps":24,"max_points":5})"));
  EXPECT_EQ(sp.fps, 24.0);
  EXPECT_FALSE(sp.substeps.has_value());
  EXPECT_EQ(sp.max_points, 5u);
}

TEST(Protocol, MalformedCommandsRejected) {
  for (const char* text : {"{oops", "[1]", R"({"kind":"reset"})", R"({"type":"jump"})", R"({"type":"reset","x":1})",
                           R"({"type":"pause"})", R"({"type":"pause","value":1})",
                           R"({"type":"poke","point":[0,0],"dir":[1,0,0],"magnitude":1,"radius":0.1})",
                           R"({"type":"poke","point":[0,0,0],"dir":[1,0,0],"magnitude":-1,"radius":0.1})",
                           R"({"type":"poke","point":[0,0,0],"dir":[1,0,0],"magnitude":1})",
                           R"({"type":"set_params","fps":0})", R"({"type":"set_params","substeps":1.5})",
                           R"({"type":"set_params","max_points":-2})"})
    EXPECT_THROW(parse_command(text), ValidationError) << text;
}

TEST(Protocol, FrameCodecRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> pos(rng() % 50);
    for (Vec3& p : pos) p = {u(rng), u(rng), u(rng)};
    const auto index = static_cast<std::uint32_t>(rng());
    const std::string bytes = encode_frame(index, pos);
    ASSERT_EQ(bytes.size(), 9 + 12 * pos.size());
    const DecodedFrame f = decode_frame(bytes);
    EXPECT_EQ(f.index, index);
    ASSERT_EQ(f.positions.size(), pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) {
      EXPECT_EQ(f.positions[i][0], static_cast<float>(pos[i].x));
      EXPECT_EQ(f.positions[i][1], static_cast<float>(pos[i].y));
      EXPECT_EQ(f.positions[i][2], static_cast<float>(pos[i].z));
    }
  }
}

TEST(Protocol, FrameLayoutIsLittleEndian) {
  const std::string b = encode_frame(0x01020304u, {{1.0, -2.0, 0.5}});
  const unsigned char expect[] = {0x01, 0x04, 0x03, 0x02, 0x01, 0x01, 0x00, 0x00, 0x00,
                                  0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x00, 0x00, 0x00, 0x3f};
  ASSERT_EQ(b.size(), sizeof(expect));
  EXPECT_EQ(std::memcmp(b.data(), expect, sizeof(expect)), 0);
  EXPECT_THROW(decode_frame(b.substr(0, b.size() - 1)), ValidationError);
  std::string bad = b;
  bad[0] = 0x02;
  EXPECT_THROW(decode_frame(bad), ValidationError);
  EXPECT_THROW(decode_frame("\x01"), ValidationError);
}

TEST(Protocol, ServerMessages) {
  const json meta = json::parse(meta_message(12, 30, {0, 0.1, 0.2}, {1, 1.1, 1.2}));
  EXPECT_EQ(meta["type"], "meta");
  EXPECT_EQ(meta["count"], 12);
  EXPECT_EQ(meta["fps"], 30.0);
  EXPECT_EQ(meta["bounds"], json({0, 0.1, 0.2, 1, 1.1, 1.2}));
  const json ack = json::parse(ack_message({1, 2, 3}));
  EXPECT_EQ(ack["type"], "ack");
  EXPECT_EQ(ack["injected_momentum"], json({1.0, 2.0, 3.0}));
  EXPECT_EQ(json::parse(error_message("bad"))["type"], "error");
}

TEST(Protocol, StreamIndices) {
  EXPECT_EQ(stream_indices(5, 0), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(stream_indices(5, 9).size(), 5u);
  const auto idx = stream_indices(10, 3);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 3, 6}));
}

TEST(Session, StaticSceneStaysAtRest) {
  Session s(block_points(), sim_config());
  for (int f = 0; f < 3; ++f) {
    const FrameOutput out = s.step_frame();
    EXPECT_EQ(out.index, static_cast<std::uint32_t>(f));
    EXPECT_EQ(out.positions, s.rest().x);
  }
}

TEST(Session, CommandsWaitForFrameBoundary) {
  Session s(block_points(), sim_config());
  s.enqueue(1, Impulse{{0.5, 0.5, 0.5}, {1, 0, 0}, 1.0, 0.2});
  expect_state_eq(s.state(), s.rest());
  const FrameOutput out = s.step_frame();
  ASSERT_EQ(out.replies.size(), 1u);
  EXPECT_EQ(out.replies[0].client, 1u);
  EXPECT_EQ(json::parse(out.replies[0].text)["type"], "ack");
  EXPECT_NE(out.positions, s.rest().x);
}

TEST(Session, PokeThenResetRestoresRestExactly) {
  Session s(block_points(), sim_config());
  s.enqueue(3, Impulse{{0.4, 0.5, 0.5}, {0, 1, 0}, 2.0, 0.2});
  for (int f = 0; f < 4; ++f) s.step_frame();
  EXPECT_NE(s.state().x, s.rest().x);
  s.enqueue(3, ResetCommand{});
  s.enqueue(3, PauseCommand{true});
  s.step_frame();
  expect_state_eq(s.state(), s.rest());
  EXPECT_EQ(s.time(), 0.0);
  s.enqueue(3, ResetCommand{});
  s.enqueue(3, ResetCommand{});
  s.step_frame();
  expect_state_eq(s.state(), s.rest());
}

TEST(Session, ResetReplaysIdentically) {
  Session s(block_points(), sim_config());
  const Impulse imp{{0.6, 0.5, 0.5}, {0, -1, 0}, 1.0, 0.2};
  s.enqueue(0, imp);
  std::vector<std::vector<Vec3>> first;
  for (int f = 0; f < 3; ++f) first.push_back(s.step_frame().positions);
  s.enqueue(0, ResetCommand{});
  s.enqueue(0, imp);
  for (int f = 0; f < 3; ++f) EXPECT_EQ(s.step_frame().positions, first[f]);
}

TEST(Session, PauseFreezesState) {
  Session s(block_points(), sim_config());
  s.enqueue(0, Impulse{{0.5, 0.5, 0.5}, {1, 0, 0}, 1.0, 0.2});
  s.step_frame();
  s.enqueue(0, PauseCommand{true});
  const std::vector<Vec3> held = s.step_frame().positions;
  EXPECT_TRUE(s.paused());
  EXPECT_EQ(s.step_frame().positions, held);
  s.enqueue(0, PauseCommand{false});
  EXPECT_NE(s.step_frame().positions, held);
}

TEST(Session, SetParams) {
  const MaterialPoints pts = block_points();
  Session s(pts, sim_config());
  SetParamsCommand c;
  c.fps = 24;
  c.substeps = 3;
  c.max_points = 10;
  s.enqueue(0, c);
  const FrameOutput out = s.step_frame();
  EXPECT_EQ(s.fps(), 24.0);
  EXPECT_EQ(s.substeps(), 3);
  EXPECT_EQ(s.stream_count(), 10u);
  EXPECT_EQ(out.positions.size(), 10u);
  EXPECT_NEAR(s.time(), 3 * sim_config().dt, 1e-15);
}

TEST(Session, BlowUpResetsToRest) {
  Session s(block_points(), sim_config());
  s.enqueue(0, Impulse{{0.5, 0.5, 0.5}, {1, 0, 0}, 1e4, 1.0});
  const FrameOutput out = s.step_frame();
  ASSERT_TRUE(out.broadcast_error.has_value());
  expect_state_eq(s.state(), s.rest());
}

TEST(Session, RejectsEmptyOrOutOfDomain) {
  EXPECT_THROW(Session(MaterialPoints{}, sim_config()), ValidationError);
  MaterialPoints pts = block_points();
  pts.x[0] = {0.01, 0.5, 0.5};
  EXPECT_THROW(Session(pts, sim_config()), ValidationError);
}

// Scripted websocket client.

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

struct Message {
  bool binary = false;
  std::string data;
};

class Client {
 public:
  explicit Client(unsigned short port) : ws_(ioc_) {
    ws_.next_layer().connect(tcp::endpoint(net::ip::address_v4::loopback(), port));
    ws_.handshake("127.0.0.1", "/sim");
  }
  ~Client() {
    beast::error_code ec;
    ws_.close(websocket::close_code::normal, ec);
  }
  Message read() {
    beast::flat_buffer buf;
    ws_.read(buf);
    return {ws_.got_binary(), beast::buffers_to_string(buf.data())};
  }
  DecodedFrame next_frame(std::vector<json>* texts = nullptr) {
    for (;;) {
      Message m = read();
      if (m.binary) return decode_frame(m.data);
      if (texts) texts->push_back(json::parse(m.data));
    }
  }
  json next_text() {
    for (;;) {
      Message m = read();
      if (!m.binary) return json::parse(m.data);
    }
  }
  void send(const std::string& text) {
    ws_.text(true);
    ws_.write(net::buffer(text));
  }

 private:
  net::io_context ioc_;
  websocket::stream<beast::tcp_stream> ws_;
};

std::unique_ptr<Server> start_server() {
  SimConfig cfg = sim_config();
  cfg.fps = 100;
  auto server = std::make_unique<Server>(std::make_unique<Session>(block_points(), cfg), 0);
  server->start();
  return server;
}

TEST(Server, ProtocolConformance) {
  const auto begin = std::chrono::steady_clock::now();
  auto server = start_server();
  Client c(server->port());
  const Message first = c.read();
  ASSERT_FALSE(first.binary);
  const json meta = json::parse(first.data);
  EXPECT_EQ(meta["type"], "meta");
  const std::size_t count = meta["count"];
  EXPECT_EQ(count, block_points().size());
  EXPECT_EQ(meta["fps"], 100.0);
  ASSERT_EQ(meta["bounds"].size(), 6u);

  const DecodedFrame rest = c.next_frame();
  ASSERT_EQ(rest.positions.size(), count);
  const DecodedFrame again = c.next_frame();
  EXPECT_GT(again.index, rest.index);
  EXPECT_EQ(again.positions, rest.positions);

  c.send(R"({"type":"poke","point":[0.5,0.5,0.5],"dir":[0,1,0],"magnitude":1.0,"radius":0.2})");
  // The ack precedes the first frame simulated after the poke was drained.
  std::uint32_t last_before_ack = again.index;
  json ack;
  for (;;) {
    const Message m = c.read();
    if (m.binary) {
      const DecodedFrame f = decode_frame(m.data);
      EXPECT_EQ(f.positions, rest.positions);
      last_before_ack = f.index;
      continue;
    }
    ack = json::parse(m.data);
    break;
  }
  ASSERT_EQ(ack["type"], "ack");
  EXPECT_GT(ack["injected_momentum"][1].get<double>(), 0.0);
  const DecodedFrame poked = c.next_frame();
  EXPECT_EQ(poked.index, last_before_ack + 1);
  EXPECT_NE(poked.positions, rest.positions);

  c.send(R"({"type":"reset"})");
  c.send(R"({"type":"pause","value":true})");
  bool restored = false;
  for (int f = 0; f < 200 && !restored; ++f) restored = c.next_frame().positions == rest.positions;
  EXPECT_TRUE(restored);
  for (int f = 0; f < 3; ++f) EXPECT_EQ(c.next_frame().positions, rest.positions);

  c.send("{not json");
  EXPECT_EQ(c.next_text()["type"], "error");
  c.send(R"({"type":"pause","value":false})");
  EXPECT_EQ(c.next_frame().positions.size(), count);

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count();
  EXPECT_LT(seconds, 30.0);
  server->stop();
  EXPECT_GT(server->frames_simulated(), 0u);
}

TEST(Server, TwoClientsReceiveIdenticalFrames) {
  auto server = start_server();
  Client a(server->port()), b(server->port());
  a.read();
  b.read();
  a.send(R"({"type":"poke","point":[0.5,0.5,0.5],"dir":[1,0,0],"magnitude":0.5,"radius":0.2})");
  std::map<std::uint32_t, std::vector<std::array<float, 3>>> seen;
  for (int f = 0; f < 8; ++f) {
    const DecodedFrame fa = a.next_frame();
    seen[fa.index] = fa.positions;
  }
  int matched = 0;
  for (int f = 0; f < 8; ++f) {
    const DecodedFrame fb = b.next_frame();
    auto it = seen.find(fb.index);
    if (it == seen.end()) continue;
    EXPECT_EQ(it->second, fb.positions);
    ++matched;
  }
  EXPECT_GT(matched, 0);
}

TEST(Server, OtherPathsAreRejected) {
  auto server = start_server();
  net::io_context ioc;
  beast::tcp_stream stream(ioc);
  stream.connect(tcp::endpoint(net::ip::address_v4::loopback(), server->port()));
  http::request<http::empty_body> req(http::verb::get, "/other", 11);
  req.set(http::field::host, "127.0.0.1");
  http::write(stream, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(stream, buf, res);
  EXPECT_EQ(res.result(), http::status::not_found);
}

TEST(Server, PortInUseIsIoError) {
  auto server = start_server();
  EXPECT_THROW(Server(std::make_unique<Session>(block_points(), sim_config()), server->port()), IoError);
}

}  // namespace
}  // namespace splatmpm::interact
