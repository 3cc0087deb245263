#pragma once

// Client/server messages as length-prefixed binary frames over an in-process
// duplex channel.
//
// Frame: u32 body length, then the body: u8 message type, i64 round,
// i64 client id, parameter record (see to_bytes). Little-endian throughout.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <utility>
#include <vector>

#include "fedssl/params.hpp"

namespace fedssl {

enum class MessageType : std::uint8_t {
  kGlobalModel = 1,   // server -> client: W_g^r (and W_g^{p,r})
  kClientUpdate = 2,  // client -> server: trained online network
};

struct Message {
  MessageType type = MessageType::kGlobalModel;
  std::int64_t round = 0;
  std::int64_t client_id = 0;
  NamedParams payload;
};

std::vector<std::uint8_t> encode_frame(const Message& msg);
/// Decodes exactly one frame; throws ErrorKind::kProtocol on malformed input.
Message decode_frame(std::span<const std::uint8_t> frame);

class ChannelEnd {
 public:
  void send(const Message& msg);
  /// Blocks until a frame arrives.
  Message receive();
  /// Frames waiting to be received on this end.
  std::size_t pending() const;

 private:
  struct Queue {
    mutable std::mutex mu;
    std::condition_variable cv;
    std::deque<std::vector<std::uint8_t>> frames;
  };
  ChannelEnd(std::shared_ptr<Queue> in, std::shared_ptr<Queue> out)
      : in_(std::move(in)), out_(std::move(out)) {}

  std::shared_ptr<Queue> in_;
  std::shared_ptr<Queue> out_;

  friend std::pair<ChannelEnd, ChannelEnd> make_duplex();
};

/// Two connected ends: what one sends, the other receives.
std::pair<ChannelEnd, ChannelEnd> make_duplex();

}  // namespace fedssl
