#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <condition_variable>
#include <cstdlib>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include "slip/errors.hpp"
#include "slip/rng.hpp"
#include "slip/transport.hpp"

using namespace slip;

namespace {

Message random_message(std::mt19937_64& rng, const PrimeField& f) {
  std::uniform_int_distribution<Residue> u(0, f.modulus() - 1);
  const std::uint32_t layer = static_cast<std::uint32_t>(rng());
  FieldVector v(rng() % 40);
  for (Residue& e : v) e = u(rng);
  switch (rng() % 4) {
    case 0:
      return LayerInput{layer, v};
    case 1:
      return LayerReply{layer, v};
    case 2:
      return FinalOutput{layer, v};
    default:
      return Abort{layer};
  }
}

/// Collects David's transcripts as sessions end.
struct SessionLog {
  std::mutex mu;
  std::condition_variable cv;
  std::map<std::uint64_t, Transcript> done;

  ServerOptions options() {
    ServerOptions o;
    o.on_session_end = [this](std::uint64_t id, const SessionHello&, const Transcript& t) {
      std::lock_guard lock(mu);
      done[id] = t;
      cv.notify_all();
    };
    return o;
  }
  Transcript wait(std::uint64_t id) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return done.count(id) > 0; });
    return done[id];
  }
};

}  // namespace

TEST(Frame, AbortIsSeventeenBytes) {
  const auto bytes = encode_message(Abort{3});
  const std::vector<std::uint8_t> expect{'S', 'L', 'P', '1', 0x04, 3, 0, 0, 0,
                                         0,   0,   0,   0,   0,    0, 0, 0};
  EXPECT_EQ(bytes, expect);
}

TEST(Frame, LittleEndianPayload) {
  const auto bytes = encode_message(LayerReply{2, {1, 2, 3}});
  ASSERT_EQ(bytes.size(), 17u + 24u);
  EXPECT_EQ(bytes[4], 0x02);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[9], 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(bytes[17 + 8 * i], i + 1);
    for (std::size_t j = 1; j < 8; ++j) EXPECT_EQ(bytes[17 + 8 * i + j], 0);
  }
  const PrimeField f(101);
  EXPECT_EQ(decode_message(bytes, f), (Message{LayerReply{2, {1, 2, 3}}}));
}

TEST(Frame, FuzzRoundTrip) {
  std::mt19937_64 rng(2024);
  const PrimeField f;
  for (int i = 0; i < 100000; ++i) {
    const Message m = random_message(rng, f);
    ASSERT_EQ(decode_message(encode_message(m), f), m);
  }
}

TEST(Frame, ConcatenatedStreamsResplit) {
  std::mt19937_64 rng(7);
  const PrimeField f;
  std::vector<std::uint8_t> stream;
  std::vector<Message> sent;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(random_message(rng, f));
    const auto b = encode_message(sent.back());
    stream.insert(stream.end(), b.begin(), b.end());
  }
  const auto frames = split_frames(stream);
  ASSERT_EQ(frames.size(), sent.size());
  for (std::size_t i = 0; i < sent.size(); ++i)
    EXPECT_EQ(to_message(frames[i], f), sent[i]);
  stream.pop_back();
  EXPECT_THROW(split_frames(stream), FrameError);
}

TEST(Frame, MalformedInputRejected) {
  const PrimeField f(101);
  auto good = encode_message(LayerInput{1, {5, 6}});
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_message(bad_magic, f), FrameError);
  auto bad_tag = good;
  bad_tag[4] = 0x07;
  EXPECT_THROW(decode_message(bad_tag, f), FrameError);
  auto truncated = good;
  truncated.resize(good.size() - 3);
  EXPECT_THROW(decode_message(truncated, f), FrameError);
  EXPECT_THROW(decode_message(std::vector<std::uint8_t>(good.begin(), good.begin() + 10), f),
               FrameError);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_THROW(decode_message(trailing, f), FrameError);
  EXPECT_THROW(decode_message(encode_message(LayerInput{1, {101}}), f), FrameError);
  auto huge = encode_message(Abort{1});
  huge[16] = 0x7f;
  EXPECT_THROW(decode_message(huge, f), FrameError);
  WireFrame abort_payload{FrameTag::kAbort, 1, {1}};
  EXPECT_THROW(to_message(abort_payload, f), FrameError);
  EXPECT_THROW(to_message(WireFrame{FrameTag::kSessionHello, 0, {}}, f), FrameError);
}

TEST(Handshake, HelloRoundTripAndChecks) {
  const MlpModel m = gen_random_model(1, std::vector<std::size_t>{4, 6, 3}, Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{1}, FixedPointCodec{});
  const DavidParts parts = DavidParts::from(d);
  const SessionHello h = SessionHello::for_session(d, Mode::kMalicious, 2);
  EXPECT_EQ(parse_hello(decode_frame(encode_frame(hello_frame(h)))), h);
  EXPECT_EQ(check_hello(h, parts), AcceptStatus::kAccepted);
  auto bad = h;
  bad.dims = {4, 6, 4};
  EXPECT_EQ(check_hello(bad, parts), AcceptStatus::kDimsMismatch);
  bad = h;
  bad.modulus = 101;
  EXPECT_EQ(check_hello(bad, parts), AcceptStatus::kModulusMismatch);
  bad = h;
  bad.frac_bits = 8;
  EXPECT_EQ(check_hello(bad, parts), AcceptStatus::kFracBitsMismatch);
  bad = h;
  bad.version = 9;
  EXPECT_EQ(check_hello(bad, parts), AcceptStatus::kVersionMismatch);
  WireFrame broken = hello_frame(h);
  broken.payload.pop_back();
  EXPECT_THROW(parse_hello(broken), FrameError);
}

TEST(Endpoint, Parsing) {
  EXPECT_EQ(parse_endpoint("10.0.0.1:99").host, "10.0.0.1");
  EXPECT_EQ(parse_endpoint("10.0.0.1:99").port, 99);
  EXPECT_EQ(parse_endpoint(":1234").host, "127.0.0.1");
  EXPECT_EQ(parse_endpoint("example").port, kDefaultPort);
  EXPECT_THROW(parse_endpoint("h:70000"), Error);
  ::setenv("SLIPWIRE_ADDR", "127.0.0.2:5555", 1);
  EXPECT_EQ(endpoint_from_env().port, 5555);
  ::unsetenv("SLIPWIRE_ADDR");
  EXPECT_EQ(endpoint_from_env().port, kDefaultPort);
}

TEST(Tcp, LoopbackMatchesInProcess) {
  const MlpModel m = gen_random_model(11, std::vector<std::size_t>{8, 12, 12, 5},
                                      Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{3}, FixedPointCodec{});
  const DavidParts parts = DavidParts::from(d);
  SessionLog log;
  DavidServer server(parts, parse_endpoint("127.0.0.1:0"), log.options());
  server.start();
  const Endpoint ep{"127.0.0.1", server.port()};
  std::uint64_t session = 0;
  for (Mode mode : {Mode::kInsecure, Mode::kHonest, Mode::kMalicious}) {
    for (std::uint64_t s = 0; s < 3; ++s, ++session) {
      Rng rng = substream(s, "inputs");
      std::uniform_real_distribution<double> u(-1, 1);
      std::vector<double> x(8);
      for (double& v : x) v = u(rng);
      MaskSet a = precompute_one(d, mode, 2, s, 0);
      MaskSet b = precompute_one(d, mode, 2, s, 0);
      InProcTransport local(parts);
      const SessionResult ref = run_protocol(d, mode, x, a, local);
      auto remote = connect_charlie(ep, SessionHello::for_session(d, mode, 2));
      const SessionResult got = run_protocol(d, mode, x, b, *remote);
      EXPECT_EQ(got.outcome, ref.outcome);
      EXPECT_EQ(got.charlie, ref.charlie);
      EXPECT_EQ(log.wait(session), *ref.david);
    }
  }
  server.stop();
}

TEST(Tcp, ConcurrentSessions) {
  const MlpModel m = gen_random_model(2, std::vector<std::size_t>{6, 6, 3}, Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{1}, FixedPointCodec{});
  const DavidParts parts = DavidParts::from(d);
  DavidServer server(parts, parse_endpoint("127.0.0.1:0"));
  server.start();
  std::vector<std::thread> clients;
  std::vector<int> ok(6, 0);
  for (int c = 0; c < 6; ++c) {
    clients.emplace_back([&, c] {
      MaskSet masks = precompute_one(d, Mode::kHonest, 0, 1, c);
      auto t = connect_charlie({"127.0.0.1", server.port()},
                               SessionHello::for_session(d, Mode::kHonest, 0));
      const std::vector<double> x(6, 0.25);
      ok[c] = !run_protocol(d, Mode::kHonest, x, masks, *t).outcome.aborted;
    });
  }
  for (auto& t : clients) t.join();
  server.stop();
  for (int v : ok) EXPECT_EQ(v, 1);
}

TEST(Tcp, MismatchedHelloRefused) {
  const MlpModel m = gen_random_model(2, std::vector<std::size_t>{6, 6, 3}, Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{1}, FixedPointCodec{});
  DavidServer server(DavidParts::from(d), parse_endpoint("127.0.0.1:0"));
  server.start();
  SessionHello h = SessionHello::for_session(d, Mode::kHonest, 0);
  h.dims = {6, 6, 4};
  try {
    connect_charlie({"127.0.0.1", server.port()}, h);
    FAIL() << "handshake should have been refused";
  } catch (const HandshakeError& e) {
    EXPECT_EQ(e.status(), AcceptStatus::kDimsMismatch);
  }
  server.stop();
}

TEST(Tcp, DisconnectMidSessionIsSessionError) {
  const MlpModel m = gen_random_model(3, std::vector<std::size_t>{4, 4, 2}, Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{1}, FixedPointCodec{});

  Socket listener(::socket(AF_INET, SOCK_STREAM, 0));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::bind(listener.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  ASSERT_EQ(::listen(listener.fd(), 1), 0);
  socklen_t len = sizeof addr;
  ::getsockname(listener.fd(), reinterpret_cast<sockaddr*>(&addr), &len);

  // Accepts the handshake, reads the first layer input, then hangs up.
  std::thread fake([&] {
    Socket conn(::accept(listener.fd(), nullptr, nullptr));
    conn.read_frame();
    conn.write_frame({FrameTag::kSessionAccept, 0, {0}});
    conn.read_frame();
  });
  MaskSet masks = precompute_one(d, Mode::kHonest, 0, 0, 0);
  auto t = connect_charlie({"127.0.0.1", ntohs(addr.sin_port)},
                           SessionHello::for_session(d, Mode::kHonest, 0));
  const std::vector<double> x(4, 0.5);
  EXPECT_THROW(run_protocol(d, Mode::kHonest, x, masks, *t), SessionError);
  fake.join();
  EXPECT_TRUE(masks.consumed());
  InProcTransport retry(DavidParts::from(d));
  EXPECT_THROW(run_protocol(d, Mode::kHonest, x, masks, retry), MaskReuseError);
}

TEST(Tcp, ConnectFailureIsSessionError) {
  const MlpModel m = gen_random_model(3, std::vector<std::size_t>{4, 2}, Activation::kReLU);
  const Decomposition d = decompose(m, std::vector<std::size_t>{0}, FixedPointCodec{});
  EXPECT_THROW(connect_charlie({"127.0.0.1", 1}, SessionHello::for_session(d, Mode::kHonest, 0)),
               SessionError);
}
