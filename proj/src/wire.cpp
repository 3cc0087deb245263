#include "fedssl/wire.hpp"

#include "byte_io.hpp"
#include "fedssl/error.hpp"

namespace fedssl {

std::vector<std::uint8_t> encode_frame(const Message& msg) {
  const std::vector<std::uint8_t> payload = to_bytes(msg.payload);
  detail::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(1 + 8 + 8 + payload.size()));
  w.u8(static_cast<std::uint8_t>(msg.type));
  w.i64(msg.round);
  w.i64(msg.client_id);
  w.bytes(payload);
  return std::move(w.buffer());
}

Message decode_frame(std::span<const std::uint8_t> frame) {
  try {
    detail::ByteReader r(frame);
    const std::uint32_t len = r.u32();
    require(len == r.remaining(), ErrorKind::kProtocol, "frame length does not match its prefix");
    Message msg;
    const std::uint8_t type = r.u8();
    require(type == static_cast<std::uint8_t>(MessageType::kGlobalModel) ||
                type == static_cast<std::uint8_t>(MessageType::kClientUpdate),
            ErrorKind::kProtocol, "unknown message type");
    msg.type = static_cast<MessageType>(type);
    msg.round = r.i64();
    msg.client_id = r.i64();
    msg.payload = from_bytes(r.take(r.remaining()));
    return msg;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kProtocol) throw;
    fail(ErrorKind::kProtocol, std::string("malformed frame: ") + e.what());
  }
}

void ChannelEnd::send(const Message& msg) {
  auto frame = encode_frame(msg);
  {
    std::lock_guard lock(out_->mu);
    out_->frames.push_back(std::move(frame));
  }
  out_->cv.notify_one();
}

Message ChannelEnd::receive() {
  std::vector<std::uint8_t> frame;
  {
    std::unique_lock lock(in_->mu);
    in_->cv.wait(lock, [&] { return !in_->frames.empty(); });
    frame = std::move(in_->frames.front());
    in_->frames.pop_front();
  }
  return decode_frame(frame);
}

std::size_t ChannelEnd::pending() const {
  std::lock_guard lock(in_->mu);
  return in_->frames.size();
}

std::pair<ChannelEnd, ChannelEnd> make_duplex() {
  auto a_to_b = std::make_shared<ChannelEnd::Queue>();
  auto b_to_a = std::make_shared<ChannelEnd::Queue>();
  return {ChannelEnd(b_to_a, a_to_b), ChannelEnd(a_to_b, b_to_a)};
}

}  // namespace fedssl
