/**
 * TCP client bindings: node, publishers, subscriptions, service calls,
 * and goals over the broker wire protocol.
 *
 * Dispatch is plain FIFO on the event loop: callbacks fire in frame
 * arrival order. Publishing is best effort; delivery guarantees beyond
 * TCP ordering live in the broker-side peers that need them.
 */

import { randomBytes } from "node:crypto";
import * as net from "node:net";

import {
  FLAG_ERROR_RESPONSE,
  Frame,
  FrameKind,
  FrameStreamDecoder,
  PayloadType,
  TypedValue,
  ZERO_CORRELATION,
  decodeTypedPayload,
  encodeFrame,
  encodeTypedPayloadAs,
  makeFrame,
  topicMatches,
} from "./wire.js";

export enum GoalState {
  PENDING = 0,
  ACTIVE = 1,
  CANCELING = 2,
  SUCCEEDED = 3,
  ABORTED = 4,
  CANCELED = 5,
}

export class NodeError extends Error {}
export class CallFailedError extends NodeError {}
export class CallTimedOutError extends NodeError {}

export interface GoalResult {
  state: GoalState;
  result: TypedValue;
}

export interface GoalHandle {
  goalId: Buffer;
  result: Promise<GoalResult>;
  cancel(): void;
}

export interface Publisher {
  topic: string;
  payloadType: PayloadType;
  publish(value: TypedValue): void;
  close(): void;
}

export interface Subscription {
  pattern: string;
  unsubscribe(): Promise<void>;
}

interface PendingControl {
  resolve(frame: Frame): void;
  reject(error: Error): void;
  timer: NodeJS.Timeout;
}

interface SubEntry {
  pattern: string;
  payloadType: PayloadType | null; // null: raw frames
  callback: ((value: TypedValue, frame: Frame) => void) | ((frame: Frame) => void);
  active: boolean;
}

interface GoalEntry {
  onFeedback?: (value: TypedValue) => void;
  lastFeedbackSeq: bigint;
  resolve(result: GoalResult): void;
  reject(error: Error): void;
  timer: NodeJS.Timeout;
  done: boolean;
}

function nowNs(): bigint {
  return BigInt(Date.now()) * 1_000_000n;
}

function freshCorrelation(): Buffer {
  let correlation: Buffer;
  do {
    correlation = randomBytes(16);
  } while (correlation.equals(ZERO_CORRELATION));
  return correlation;
}

export interface NodeOptions {
  connectTimeoutMs?: number;
  controlTimeoutMs?: number;
}

export class MetaNode {
  readonly name: string;
  private socket: net.Socket;
  private decoder = new FrameStreamDecoder();
  private pending = new Map<string, PendingControl>();
  private subs: SubEntry[] = [];
  private goals = new Map<string, GoalEntry>();
  private callSeq = 0n;
  private controlTimeoutMs: number;
  private closed = false;

  private constructor(name: string, socket: net.Socket, controlTimeoutMs: number) {
    this.name = name;
    this.socket = socket;
    this.controlTimeoutMs = controlTimeoutMs;
    socket.on("data", (chunk: Buffer) => {
      let frames: Frame[];
      try {
        frames = this.decoder.feed(chunk);
      } catch (error) {
        socket.destroy();
        this.failAll(new NodeError(`stream decode error: ${error}`));
        return;
      }
      for (const frame of frames) {
        this.dispatch(frame);
      }
    });
    socket.on("close", () => {
      this.closed = true;
      this.failAll(new NodeError("connection closed"));
    });
    socket.on("error", () => {
      /* close follows */
    });
  }

  /** Connect to a broker and announce the node name. */
  static async connect(name: string, host: string, port: number,
                       options: NodeOptions = {}): Promise<MetaNode> {
    const socket = await new Promise<net.Socket>((resolve, reject) => {
      const s = net.createConnection({ host, port }, () => {
        s.setNoDelay(true);
        resolve(s);
      });
      s.once("error", reject);
      s.setTimeout(options.connectTimeoutMs ?? 5000, () => {
        s.destroy();
        reject(new NodeError(`connect timeout to ${host}:${port}`));
      });
    });
    socket.setTimeout(0);
    const node = new MetaNode(name, socket, options.controlTimeoutMs ?? 5000);
    const response = await node.controlRequest(
      FrameKind.ADVERTISE, "", PayloadType.STRING_UTF8,
      Buffer.from(JSON.stringify({ role: "node", node: name })),
    );
    if (response.flags & FLAG_ERROR_RESPONSE) {
      node.close();
      throw new NodeError(response.payload.toString("utf-8"));
    }
    return node;
  }

  private failAll(error: Error): void {
    for (const pending of this.pending.values()) {
      clearTimeout(pending.timer);
      pending.reject(error);
    }
    this.pending.clear();
    for (const goal of this.goals.values()) {
      if (!goal.done) {
        goal.done = true;
        clearTimeout(goal.timer);
        goal.reject(error);
      }
    }
    this.goals.clear();
  }

  private sendFrame(frame: Frame): void {
    if (this.closed) {
      throw new NodeError("node is closed");
    }
    this.socket.write(encodeFrame(frame));
  }

  private nextSeq(): bigint {
    this.callSeq += 1n;
    return this.callSeq;
  }

  private dispatch(frame: Frame): void {
    switch (frame.kind) {
      case FrameKind.DATA: {
        for (const sub of this.subs) {
          if (!sub.active || !topicMatches(sub.pattern, frame.topic)) {
            continue;
          }
          if (sub.payloadType === null) {
            (sub.callback as (frame: Frame) => void)(frame);
            continue;
          }
          if (frame.payloadType !== sub.payloadType) {
            continue; // type mismatch: never delivered
          }
          let value: TypedValue;
          try {
            value = decodeTypedPayload(frame.payloadType, frame.payload);
          } catch {
            continue;
          }
          (sub.callback as (value: TypedValue, frame: Frame) => void)(value, frame);
        }
        return;
      }
      case FrameKind.SVC_RESP:
      case FrameKind.SUB:
      case FrameKind.UNSUB:
      case FrameKind.ADVERTISE:
      case FrameKind.INFO_RESP: {
        const key = frame.correlation.toString("hex");
        const pending = this.pending.get(key);
        if (pending) {
          this.pending.delete(key);
          clearTimeout(pending.timer);
          pending.resolve(frame);
        }
        return;
      }
      case FrameKind.ACTION_FEEDBACK: {
        const goal = this.goals.get(frame.correlation.toString("hex"));
        if (!goal || goal.done || !goal.onFeedback) {
          return;
        }
        if (frame.sequence <= goal.lastFeedbackSeq) {
          return; // regression or duplicate
        }
        goal.lastFeedbackSeq = frame.sequence;
        try {
          goal.onFeedback(decodeTypedPayload(frame.payloadType, frame.payload));
        } catch {
          /* undecodable feedback dropped */
        }
        return;
      }
      case FrameKind.ACTION_RESULT: {
        const key = frame.correlation.toString("hex");
        const goal = this.goals.get(key);
        if (!goal || goal.done) {
          return;
        }
        goal.done = true;
        clearTimeout(goal.timer);
        this.goals.delete(key);
        if (frame.flags & FLAG_ERROR_RESPONSE) {
          goal.reject(new CallFailedError(frame.payload.toString("utf-8")));
          return;
        }
        try {
          const state = frame.payload[0] as GoalState;
          const result = decodeTypedPayload(frame.payloadType, frame.payload.subarray(1));
          goal.resolve({ state, result });
        } catch (error) {
          goal.reject(new NodeError(`undecodable result: ${error}`));
        }
        return;
      }
      case FrameKind.HEARTBEAT:
      case FrameKind.ACK:
        return;
      default:
        return;
    }
  }

  private controlRequest(kind: FrameKind, topic: string, payloadType: PayloadType,
                         payload: Buffer,
                         correlation: Buffer = freshCorrelation()): Promise<Frame> {
    return new Promise<Frame>((resolve, reject) => {
      const key = correlation.toString("hex");
      const timer = setTimeout(() => {
        this.pending.delete(key);
        reject(new CallTimedOutError(`broker did not confirm ${FrameKind[kind]} for ${topic}`));
      }, this.controlTimeoutMs);
      this.pending.set(key, { resolve, reject, timer });
      try {
        this.sendFrame(makeFrame({
          kind, topic, payloadType, payload, correlation,
          sequence: this.nextSeq(), timestampSend: nowNs(),
        }));
      } catch (error) {
        clearTimeout(timer);
        this.pending.delete(key);
        reject(error as Error);
      }
    });
  }

  /** Declare a typed publisher; the broker rejects type conflicts. */
  async advertise(topic: string, payloadType: PayloadType): Promise<Publisher> {
    const pubId = freshCorrelation();
    const response = await this.controlRequest(
      FrameKind.ADVERTISE, topic, payloadType,
      Buffer.from(JSON.stringify({ role: "publisher", node: this.name })), pubId,
    );
    if (response.flags & FLAG_ERROR_RESPONSE) {
      throw new NodeError(response.payload.toString("utf-8"));
    }
    let sequence = 0n;
    let open = true;
    const node = this;
    return {
      topic,
      payloadType,
      publish(value: TypedValue): void {
        if (!open) {
          throw new NodeError(`publisher for ${topic} is closed`);
        }
        // encode before anything touches the wire: a mismatched value throws here
        const payload = encodeTypedPayloadAs(payloadType, value);
        sequence += 1n;
        node.sendFrame(makeFrame({
          kind: FrameKind.DATA, topic, payloadType, payload,
          sequence, timestampSend: nowNs(), correlation: pubId,
        }));
      },
      close(): void {
        open = false;
        void node.controlRequest(
          FrameKind.ADVERTISE, topic, payloadType,
          Buffer.from(JSON.stringify({ role: "publisher", node: node.name, remove: true })),
          pubId,
        ).catch(() => undefined);
      },
    };
  }

  /** Typed subscription; frames of other types are never delivered. */
  async subscribe(topic: string, payloadType: PayloadType,
                  callback: (value: TypedValue, frame: Frame) => void): Promise<Subscription> {
    return this.subscribeEntry({ pattern: topic, payloadType, callback, active: true });
  }

  /** Pattern subscription delivering whole frames, any payload type. */
  async subscribeRaw(pattern: string,
                     callback: (frame: Frame) => void): Promise<Subscription> {
    return this.subscribeEntry({ pattern, payloadType: null, callback, active: true });
  }

  private async subscribeEntry(entry: SubEntry): Promise<Subscription> {
    const response = await this.controlRequest(
      FrameKind.SUB, entry.pattern, PayloadType.STRING_UTF8,
      Buffer.from(JSON.stringify({ node: this.name })),
    );
    if (response.flags & FLAG_ERROR_RESPONSE) {
      throw new NodeError(response.payload.toString("utf-8"));
    }
    this.subs.push(entry);
    const node = this;
    return {
      pattern: entry.pattern,
      async unsubscribe(): Promise<void> {
        entry.active = false;
        node.subs = node.subs.filter((s) => s !== entry);
        await node.controlRequest(FrameKind.UNSUB, entry.pattern, PayloadType.NULL,
                                  Buffer.alloc(0)).catch(() => undefined);
      },
    };
  }

  /**
   * One request/response exchange, paired by correlation id. Returns
   * immediately-pending work; the promise rejects CallFailedError on a
   * routing or handler error and CallTimedOutError on timeout.
   */
  callAsync(service: string, value: TypedValue,
            options: { requestType?: PayloadType; timeoutMs?: number } = {}): Promise<TypedValue> {
    const requestType = options.requestType ?? inferType(value);
    const payload = encodeTypedPayloadAs(requestType, value);
    const correlation = freshCorrelation();
    const key = correlation.toString("hex");
    return new Promise<TypedValue>((resolve, reject) => {
      const timer = setTimeout(() => {
        this.pending.delete(key);
        reject(new CallTimedOutError(`call to ${service} timed out`));
      }, options.timeoutMs ?? 5000);
      this.pending.set(key, {
        timer,
        reject,
        resolve: (frame: Frame) => {
          if (frame.flags & FLAG_ERROR_RESPONSE) {
            reject(new CallFailedError(frame.payload.toString("utf-8")));
            return;
          }
          try {
            resolve(decodeTypedPayload(frame.payloadType, frame.payload));
          } catch (error) {
            reject(new NodeError(`undecodable response: ${error}`));
          }
        },
      });
      try {
        this.sendFrame(makeFrame({
          kind: FrameKind.SVC_REQ, topic: service, payloadType: requestType, payload,
          correlation, sequence: this.nextSeq(), timestampSend: nowNs(),
        }));
      } catch (error) {
        clearTimeout(timer);
        this.pending.delete(key);
        reject(error as Error);
      }
    });
  }

  /** Submit a goal; feedback streams to the callback in sequence order. */
  sendGoal(action: string, goal: TypedValue,
           options: { goalType?: PayloadType; onFeedback?: (value: TypedValue) => void;
                      timeoutMs?: number } = {}): GoalHandle {
    const goalType = options.goalType ?? inferType(goal);
    const payload = encodeTypedPayloadAs(goalType, goal);
    const goalId = freshCorrelation();
    const key = goalId.toString("hex");
    const node = this;
    let entry!: GoalEntry;
    const result = new Promise<GoalResult>((resolve, reject) => {
      const timer = setTimeout(() => {
        if (!entry.done) {
          entry.done = true;
          node.goals.delete(key);
          node.sendCancel(action, goalId);
          reject(new CallTimedOutError(`goal on ${action} timed out`));
        }
      }, options.timeoutMs ?? 30000);
      entry = {
        onFeedback: options.onFeedback,
        lastFeedbackSeq: 0n,
        resolve,
        reject,
        timer,
        done: false,
      };
      node.goals.set(key, entry);
      try {
        node.sendFrame(makeFrame({
          kind: FrameKind.ACTION_GOAL, topic: action, payloadType: goalType, payload,
          correlation: goalId, sequence: node.nextSeq(), timestampSend: nowNs(),
        }));
      } catch (error) {
        entry.done = true;
        clearTimeout(timer);
        node.goals.delete(key);
        reject(error as Error);
      }
    });
    return {
      goalId,
      result,
      cancel: () => this.sendCancel(action, goalId),
    };
  }

  private sendCancel(action: string, goalId: Buffer): void {
    try {
      this.sendFrame(makeFrame({
        kind: FrameKind.ACTION_CANCEL, topic: action, payloadType: PayloadType.NULL,
        payload: Buffer.alloc(0), correlation: goalId,
        sequence: this.nextSeq(), timestampSend: nowNs(),
      }));
    } catch {
      /* best effort */
    }
  }

  /** The broker's node/topic/service graph. */
  async graphInfo(): Promise<{ nodes: string[]; topics: object[]; services: string[] }> {
    const response = await this.controlRequest(FrameKind.INFO_REQ, "", PayloadType.NULL,
                                               Buffer.alloc(0));
    return JSON.parse(response.payload.toString("utf-8"));
  }

  /** Let queued callbacks run for a while (FIFO event-loop dispatch). */
  spin(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
  }

  close(): void {
    if (this.closed) {
      return;
    }
    this.closed = true;
    this.socket.end();
    this.socket.destroy();
    this.failAll(new NodeError("node closed"));
  }
}

function inferType(value: TypedValue): PayloadType {
  if (value === null || value === undefined) return PayloadType.NULL;
  if (typeof value === "boolean") return PayloadType.BOOL;
  if (typeof value === "bigint") return PayloadType.INT64;
  if (typeof value === "number") {
    return Number.isInteger(value) ? PayloadType.INT64 : PayloadType.FLOAT64;
  }
  if (typeof value === "string") return PayloadType.STRING_UTF8;
  if (value instanceof Uint8Array) return PayloadType.BYTES;
  throw new NodeError("cannot infer a payload type; pass one explicitly");
}
